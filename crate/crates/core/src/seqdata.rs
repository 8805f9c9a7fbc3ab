//! Protein sequence input: FASTA parsing, the amino-acid vocabulary,
//! dataset filtering and padded batch assembly.
//!
//! Batch rows use the layout `[BOS, residues.., EOS, PAD..]`, so residue `i`
//! of a sequence sits at padded position `i + 1`.

use std::io::{BufRead, Write};

use ndarray::Array2;

use crate::error::{Error, Result};

/// The 20 canonical amino acids, alphabetical by one-letter code.
pub const ALPHABET: [u8; 20] = *b"ACDEFGHIKLMNPQRSTVWY";
pub const NUM_AMINO_ACIDS: usize = 20;

pub const PAD: u8 = 20;
pub const BOS: u8 = 21;
pub const EOS: u8 = 22;
pub const MASK: u8 = 23;
/// Vocabulary size including the special ids.
pub const VOCAB_SIZE: usize = 24;

/// Longest sequence accepted, excluding the two edge slots.
pub const MAX_RESIDUES: usize = 254;
pub const PADDED_LEN: usize = MAX_RESIDUES + 2;

/// Bijective map between canonical residue letters and ids `0..20`.
pub struct Vocabulary;

impl Vocabulary {
    pub fn id(letter: u8) -> Option<u8> {
        let upper = letter.to_ascii_uppercase();
        ALPHABET.iter().position(|&c| c == upper).map(|i| i as u8)
    }

    pub fn letter(id: u8) -> Option<char> {
        ALPHABET.get(id as usize).map(|&c| c as char)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub id: String,
    pub sequence: String,
}

/// Parse FASTA text. Sequence lines are concatenated with whitespace removed;
/// blank lines are ignored.
pub fn parse_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>> {
    let mut records: Vec<FastaRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(header) = trimmed.strip_prefix('>') {
            records.push(FastaRecord {
                id: header.trim().to_string(),
                sequence: String::new(),
            });
        } else {
            let Some(current) = records.last_mut() else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "sequence data before first header".into(),
                });
            };
            current
                .sequence
                .extend(trimmed.chars().filter(|c| !c.is_whitespace()));
        }
    }
    Ok(records)
}

pub fn parse_fasta_str(text: &str) -> Result<Vec<FastaRecord>> {
    parse_fasta(text.as_bytes())
}

pub fn write_fasta<W: Write>(mut out: W, records: &[TokenSequence]) -> Result<()> {
    for (i, rec) in records.iter().enumerate() {
        let id = rec.id.clone().unwrap_or_else(|| format!("seq{i}"));
        writeln!(out, ">{id}")?;
        writeln!(out, "{}", rec.to_letters())?;
    }
    Ok(())
}

/// A tokenized sequence of canonical residues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub residues: Vec<u8>,
    pub id: Option<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn to_letters(&self) -> String {
        self.residues
            .iter()
            .map(|&t| Vocabulary::letter(t).unwrap_or('?'))
            .collect()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }
}

/// Tokenize a sequence with the default length limit.
pub fn tokenize(sequence: &str) -> Result<TokenSequence> {
    tokenize_with_limit(sequence, MAX_RESIDUES)
}

pub fn tokenize_with_limit(sequence: &str, max_residues: usize) -> Result<TokenSequence> {
    let mut residues = Vec::with_capacity(sequence.len());
    for (pos, ch) in sequence.chars().enumerate() {
        let id = if ch.is_ascii() {
            Vocabulary::id(ch as u8)
        } else {
            None
        };
        match id {
            Some(id) => residues.push(id),
            None => return Err(Error::NonCanonical { ch, pos }),
        }
    }
    if residues.is_empty() || residues.len() > max_residues {
        return Err(Error::Length {
            len: residues.len(),
            max: max_residues,
        });
    }
    Ok(TokenSequence { residues, id: None })
}

/// Keep records that tokenize cleanly within `max_residues`; return them with
/// the number dropped.
pub fn filter_dataset(records: &[FastaRecord], max_residues: usize) -> (Vec<TokenSequence>, usize) {
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for rec in records {
        match tokenize_with_limit(&rec.sequence, max_residues) {
            Ok(seq) => kept.push(seq.with_id(rec.id.clone())),
            Err(_) => dropped += 1,
        }
    }
    (kept, dropped)
}

/// A padded batch in the `[BOS, residues.., EOS, PAD..]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Array2<u8>,
    /// True exactly on residue positions.
    pub mask: Array2<bool>,
    pub lengths: Vec<usize>,
    pub ids: Vec<Option<String>>,
    pub padded_len: usize,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn residue_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Row `b` from BOS through EOS inclusive.
    pub fn window(&self, b: usize) -> Vec<u8> {
        let len = self.lengths[b];
        self.tokens.row(b).iter().take(len + 2).copied().collect()
    }

    /// Residue tokens of row `b`.
    pub fn residues(&self, b: usize) -> Vec<u8> {
        let len = self.lengths[b];
        self.tokens
            .row(b)
            .iter()
            .skip(1)
            .take(len)
            .copied()
            .collect()
    }
}

pub fn pad_batch(seqs: &[TokenSequence]) -> Result<TokenBatch> {
    pad_batch_to(seqs, PADDED_LEN)
}

pub fn pad_batch_to(seqs: &[TokenSequence], padded_len: usize) -> Result<TokenBatch> {
    let max = padded_len.saturating_sub(2);
    let mut tokens = Array2::from_elem((seqs.len(), padded_len), PAD);
    let mut mask = Array2::from_elem((seqs.len(), padded_len), false);
    let mut lengths = Vec::with_capacity(seqs.len());
    for (b, seq) in seqs.iter().enumerate() {
        let len = seq.len();
        if len == 0 || len > max {
            return Err(Error::Length { len, max });
        }
        tokens[[b, 0]] = BOS;
        for (i, &r) in seq.residues.iter().enumerate() {
            if r as usize >= NUM_AMINO_ACIDS {
                return Err(Error::Shape(format!("residue id {r} out of range")));
            }
            tokens[[b, i + 1]] = r;
            mask[[b, i + 1]] = true;
        }
        tokens[[b, len + 1]] = EOS;
        lengths.push(len);
    }
    Ok(TokenBatch {
        tokens,
        mask,
        lengths,
        ids: seqs.iter().map(|s| s.id.clone()).collect(),
        padded_len,
    })
}
