//! Discrete latents: vocabularies, token grammars, extractors and AR priors.
//!
//! Latent files are the dump/edit surface shared with the CLI: a header line,
//! then one tab-separated line per sample holding the sample id, its class,
//! the scheme name and the space-separated token surfaces.

pub mod codebook;
pub mod ellipse;
pub mod extract;
pub mod grammar;
pub mod prior;
pub mod vocab;

use std::io::{BufRead, Write};

pub use codebook::{build_codebook, Codebook};
pub use ellipse::{ellipse_fit, ellipse_fit_grid, ellipse_fit_weighted, EllipseFit};
pub use extract::{segment_canvas, LatentConfig, LatentSpace};
pub use grammar::{
    decode_bbox, decode_blob, encode_bbox, encode_blob, parse_sequence, voken_decode, voken_encode,
    BboxParams, BlobParams, BlobQuantizer, LatentContent, LatentScheme, LatentSequence,
};
pub use prior::{ar_nll, ar_sample, fit_tabular_prior, ArDraw, ArPrior, NeuralPrior, NeuralPriorConfig, TabularPrior};
pub use vocab::{TokenId, Vocab, VocabSpec, BOS, DELIM, EOS};

use crate::error::{Error, ParseError, ParseErrors, Result};

pub const LATENT_FILE_HEADER: &str = "sample_id\tclass\tscheme\ttokens";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentRecord {
    pub sample_id: usize,
    pub class: usize,
    pub sequence: LatentSequence,
}

pub fn write_latent_file<W: Write>(out: W, records: &[LatentRecord], vocab: &Vocab) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{LATENT_FILE_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.sample_id,
            r.class,
            r.sequence.scheme,
            vocab.render(&r.sequence.tokens)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and grammar-checks a latent file; every bad line is reported.
pub fn read_latent_file<R: BufRead>(input: R, space: &LatentSpace) -> Result<Vec<LatentRecord>> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || (i == 0 && trimmed == LATENT_FILE_HEADER) {
            continue;
        }
        match parse_line(trimmed, space) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(ParseError {
                line: Some(lineno),
                message: match e {
                    Error::Parse(p) => p.to_string(),
                    other => other.to_string(),
                },
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::Parse(ParseErrors(errors)))
    }
}

fn parse_line(line: &str, space: &LatentSpace) -> Result<LatentRecord> {
    let mut fields = line.splitn(4, '\t');
    let (Some(id), Some(class), Some(scheme), Some(tokens)) = (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(Error::parse("expected four tab-separated fields"));
    };
    let sample_id = id
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(format!("bad sample id {id:?}")))?;
    let class = class
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&c| c < space.dataset.n_classes())
        .ok_or_else(|| Error::parse(format!("bad class {class:?}")))?;
    let scheme = LatentScheme::parse(scheme.trim())?;
    let sequence = LatentSequence::new(scheme, space.vocab().lookup_all(tokens)?);
    space.parse(&sequence)?;
    Ok(LatentRecord {
        sample_id,
        class,
        sequence,
    })
}
