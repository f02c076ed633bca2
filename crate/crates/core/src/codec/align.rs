//! Character-level edit-distance alignment of a generated sentence copy
//! against its source, used to map decoded spans back to source offsets.

/// Default ceiling on `distance / len(source)` before a copy is rejected.
pub const DEFAULT_MAX_EDIT_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("generated text deviates too far from source (edit ratio {ratio:.3} > {max_ratio})")]
pub struct AlignmentRejected {
    pub ratio: f64,
    pub max_ratio: f64,
    pub distance: usize,
}

/// Result of aligning a generated string to a source string.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// For each generated character, the source offset it aligns to.
    /// Inserted characters map to the next aligned source character.
    pub source_offsets: Vec<usize>,
    /// `end_offsets[i]` is the source boundary after generated character `i - 1`.
    end_offsets: Vec<usize>,
    pub distance: usize,
    pub ratio: f64,
}

impl Alignment {
    fn identity(len: usize) -> Self {
        Alignment {
            source_offsets: (0..len).collect(),
            end_offsets: (0..=len).collect(),
            distance: 0,
            ratio: 0.0,
        }
    }

    pub fn generated_len(&self) -> usize {
        self.source_offsets.len()
    }

    /// Maps a generated span `[start, end)` onto the source. `None` when the
    /// mapped span is empty (for instance, it covers only inserted characters).
    pub fn map_span(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        if start >= end || end > self.generated_len() {
            return None;
        }
        let s = self.source_offsets[start];
        let e = self.end_offsets[end];
        (s < e).then_some((s, e))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Op {
    Match,
    Substitute,
    /// Source character absent from the generated text.
    Delete,
    /// Generated character absent from the source.
    Insert,
}

/// Aligns `generated` to `source` and rejects the result when the edit
/// ratio exceeds `max_ratio`.
pub fn align_to_source(generated: &str, source: &str, max_ratio: f64) -> Result<Alignment, AlignmentRejected> {
    let g: Vec<char> = generated.chars().collect();
    let s: Vec<char> = source.chars().collect();
    let a = align_chars(&g, &s);
    if a.ratio > max_ratio {
        return Err(AlignmentRejected { ratio: a.ratio, max_ratio, distance: a.distance });
    }
    Ok(a)
}

/// Unit-cost minimum edit-distance alignment. Ties in the traceback prefer
/// match, then substitution, then deletion, then insertion.
pub fn align_chars(generated: &[char], source: &[char]) -> Alignment {
    if generated == source {
        return Alignment::identity(source.len());
    }
    // common prefix and suffix are always part of some optimal alignment
    let prefix = generated.iter().zip(source).take_while(|(a, b)| a == b).count();
    let suffix = generated[prefix..]
        .iter()
        .rev()
        .zip(source[prefix..].iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    let g_mid = &generated[prefix..generated.len() - suffix];
    let s_mid = &source[prefix..source.len() - suffix];

    let mut ops = Vec::with_capacity(generated.len() + source.len());
    ops.extend(std::iter::repeat_n(Op::Match, prefix));
    let distance = traceback(g_mid, s_mid, &mut ops);
    ops.extend(std::iter::repeat_n(Op::Match, suffix));

    let mut aligned: Vec<Option<usize>> = Vec::with_capacity(generated.len());
    let mut j = 0;
    for op in &ops {
        match op {
            Op::Match | Op::Substitute => {
                aligned.push(Some(j));
                j += 1;
            }
            Op::Delete => j += 1,
            Op::Insert => aligned.push(None),
        }
    }
    debug_assert_eq!(j, source.len());

    let mut source_offsets = vec![0; generated.len()];
    let mut next = source.len();
    for i in (0..generated.len()).rev() {
        if let Some(j) = aligned[i] {
            next = j;
        }
        source_offsets[i] = next;
    }
    let mut end_offsets = Vec::with_capacity(generated.len() + 1);
    end_offsets.push(0);
    for i in 0..generated.len() {
        end_offsets.push(match aligned[i] {
            Some(j) => j + 1,
            None => source_offsets[i],
        });
    }

    Alignment {
        source_offsets,
        end_offsets,
        distance,
        ratio: distance as f64 / source.len().max(1) as f64,
    }
}

/// Fills the DP table for `g` against `s`, appends the traceback ops in
/// forward order and returns the distance.
fn traceback(g: &[char], s: &[char], ops: &mut Vec<Op>) -> usize {
    let (n, m) = (g.len(), s.len());
    let width = m + 1;
    let mut d = vec![0u32; (n + 1) * width];
    for (j, cell) in d[..width].iter_mut().enumerate() {
        *cell = j as u32;
    }
    for i in 1..=n {
        let row = i * width;
        let prev = row - width;
        d[row] = i as u32;
        for j in 1..=m {
            let sub = d[prev + j - 1] + u32::from(g[i - 1] != s[j - 1]);
            let del = d[row + j - 1] + 1;
            let ins = d[prev + j] + 1;
            d[row + j] = sub.min(del).min(ins);
        }
    }

    let start = ops.len();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * width + j - 1];
            if g[i - 1] == s[j - 1] && here == diag {
                ops.push(Op::Match);
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                ops.push(Op::Substitute);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == d[i * width + j - 1] + 1 {
            ops.push(Op::Delete);
            j -= 1;
        } else {
            ops.push(Op::Insert);
            i -= 1;
        }
    }
    ops[start..].reverse();
    d[n * width + m] as usize
}

/// Plain unit-cost edit distance between two strings.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    align_chars(&a, &b).distance
}
