use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_len += o.ref_len;
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
/// backtrace prefers substitution/match, then deletion, then insertion.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts { ref_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetStats {
    pub name: String,
    pub counts: EditCounts,
    pub utterances: usize,
    /// Utterances with an empty reference (their hypothesis tokens count
    /// as insertions).
    pub empty_refs: usize,
}

impl SetStats {
    pub fn wer(&self) -> f64 {
        100.0 * self.counts.errors() as f64 / self.counts.ref_len as f64
    }
}

/// Error rates per set with both averaging conventions, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    pub sets: Vec<SetStats>,
    /// Arithmetic mean of the per-set rates.
    pub mean_wer: f64,
    /// Summed errors over summed reference length.
    pub overall_wer: f64,
}

pub fn wer_report<T: PartialEq>(sets: &[(String, Vec<(Vec<T>, Vec<T>)>)]) -> Result<WerReport> {
    if sets.is_empty() {
        return Err(Error::config("WER report needs at least one set"));
    }
    let mut stats = Vec::with_capacity(sets.len());
    let mut total = EditCounts::default();
    for (name, pairs) in sets {
        let mut s = SetStats { name: name.clone(), counts: EditCounts::default(), utterances: pairs.len(), empty_refs: 0 };
        for (r, h) in pairs {
            s.counts.add(&edit_counts(r, h));
            s.empty_refs += usize::from(r.is_empty());
        }
        if s.counts.ref_len == 0 {
            return Err(Error::config(format!("set {name:?} has no reference tokens")));
        }
        total.add(&s.counts);
        stats.push(s);
    }
    let mean_wer = stats.iter().map(SetStats::wer).sum::<f64>() / stats.len() as f64;
    let overall_wer = 100.0 * total.errors() as f64 / total.ref_len as f64;
    Ok(WerReport { sets: stats, mean_wer, overall_wer })
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>6} {:>6} {:>6} {:>8} {:>8}", "set", "S", "D", "I", "ref_len", "WER%")?;
        for s in &self.sets {
            let c = &s.counts;
            write!(
                f,
                "{:<16} {:>6} {:>6} {:>6} {:>8} {:>8.2}",
                s.name, c.substitutions, c.deletions, c.insertions, c.ref_len, s.wer()
            )?;
            if s.empty_refs > 0 {
                write!(f, "  ({} empty references)", s.empty_refs)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "MEAN {:.2}", self.mean_wer)?;
        write!(f, "OVERALL {:.2}", self.overall_wer)
    }
}
