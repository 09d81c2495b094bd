//! Character error rate.

use std::io::Write;
use std::path::Path;

use crate::error::{io_err, HtrError, Result};

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    pub edits: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub total_edits: usize,
    pub total_target_chars: usize,
    pub items: Vec<EvalItem>,
}

/// Micro-averaged CER over `(id, hypothesis, reference)` triples.
pub fn corpus_cer<I, S1, S2, S3>(triples: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = (S1, S2, S3)>,
    S1: Into<String>,
    S2: Into<String>,
    S3: Into<String>,
{
    let mut items = Vec::new();
    let (mut edits, mut chars) = (0, 0);
    for (id, hyp, reference) in triples {
        let (hypothesis, reference) = (hyp.into(), reference.into());
        let e = levenshtein(&hypothesis, &reference);
        edits += e;
        chars += reference.chars().count();
        items.push(EvalItem {
            id: id.into(),
            hypothesis,
            reference,
            edits: e,
        });
    }
    if chars == 0 {
        return Err(HtrError::Empty("every reference transcript is empty".into()));
    }
    Ok(EvalReport {
        cer: edits as f64 / chars as f64,
        total_edits: edits,
        total_target_chars: chars,
        items,
    })
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "CER {:.4} ({} edits / {} chars, {} lines)",
            self.cer,
            self.total_edits,
            self.total_target_chars,
            self.items.len()
        )
    }

    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "id\tedits\tref_chars\thypothesis\treference")?;
        for it in &self.items {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                it.id,
                it.edits,
                it.reference.chars().count(),
                it.hypothesis,
                it.reference
            )?;
        }
        writeln!(
            w,
            "#total\t{}\t{}\tcer={}\t",
            self.total_edits, self.total_target_chars, self.cer
        )
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_tsv(std::io::BufWriter::new(f)).map_err(io_err(path))
    }
}
