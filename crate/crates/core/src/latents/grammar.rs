//! Token grammars for the latent schemes.
//!
//! ```text
//! text     := MODE <eos>
//! bbox     := BOX+ <eos>              BOX  := ( INT , INT , INT , INT )
//! blob     := BLOB+ <eos>             BLOB := ( INT , INT , INT , INT , INT )
//! voken    := V ( # V )* <eos>
//! combined := MODE | BOX+ | V ( # V )* <eos>
//! INT      := decimal digits without leading zeros
//! ```

use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use super::vocab::{TokenId, Vocab, DELIM, EOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentScheme {
    Text,
    Bbox,
    Blob,
    Voken,
    Combined,
}

impl LatentScheme {
    pub const ALL: [LatentScheme; 5] = [
        LatentScheme::Text,
        LatentScheme::Bbox,
        LatentScheme::Blob,
        LatentScheme::Voken,
        LatentScheme::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LatentScheme::Text => "text",
            LatentScheme::Bbox => "bbox",
            LatentScheme::Blob => "blob",
            LatentScheme::Voken => "voken",
            LatentScheme::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown latent scheme {s:?}")))
    }
}

impl std::fmt::Display for LatentScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tokens `z_1 .. z_N`, the last one being `<eos>`; `<bos>` is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentSequence {
    pub scheme: LatentScheme,
    pub tokens: Vec<TokenId>,
}

impl LatentSequence {
    pub fn new(scheme: LatentScheme, tokens: Vec<TokenId>) -> Self {
        Self { scheme, tokens }
    }

    /// Tokens without the trailing `<eos>`.
    pub fn payload(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Box corners in the normalized `[0, 1000]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BboxParams {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

pub const BBOX_MAX: u32 = 1000;

impl BboxParams {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.x1, self.y1, self.x2, self.y2].iter().any(|&v| v > BBOX_MAX) {
            return Err(Error::contract(format!("bbox coordinate outside [0, {BBOX_MAX}]: {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::contract(format!("bbox corners out of order: {self:?}")));
        }
        Ok(())
    }

    /// `"x1, y1, x2, y2"`.
    pub fn to_text(&self) -> String {
        format!("{}, {}, {}, {}", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Tilted ellipse in normalized canvas units; `theta_deg` in `[0, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub xc: f64,
    pub yc: f64,
    pub r_major: f64,
    pub r_minor: f64,
    pub theta_deg: f64,
}

impl BlobParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.xc, self.yc, self.r_major, self.r_minor, self.theta_deg];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("blob parameters must be finite"));
        }
        if !(self.r_minor > 0.0) || self.r_major < self.r_minor {
            return Err(Error::contract(format!(
                "blob radii must satisfy r_major >= r_minor > 0, got {} / {}",
                self.r_major, self.r_minor
            )));
        }
        if !(0.0..180.0).contains(&self.theta_deg) {
            return Err(Error::contract(format!("blob angle {} outside [0, 180)", self.theta_deg)));
        }
        Ok(())
    }
}

/// Uniform bins: positions and radii over `[0, extent)`, angle over `[0, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobQuantizer {
    pub extent: f64,
    pub position_bins: u32,
    pub angle_bins: u32,
}

impl Default for BlobQuantizer {
    fn default() -> Self {
        Self {
            extent: 1000.0,
            position_bins: 1000,
            angle_bins: 180,
        }
    }
}

impl BlobQuantizer {
    fn pos_width(&self) -> f64 {
        self.extent / self.position_bins as f64
    }

    fn angle_width(&self) -> f64 {
        180.0 / self.angle_bins as f64
    }

    fn bin(v: f64, width: f64, bins: u32) -> u32 {
        ((v / width).floor().max(0.0) as u64).min(bins as u64 - 1) as u32
    }

    /// Bin indices `(xc, yc, r_major, r_minor, theta)`.
    pub fn bins(&self, p: &BlobParams) -> Result<[u32; 5]> {
        p.validate()?;
        let w = self.pos_width();
        let b = |v| Self::bin(v, w, self.position_bins);
        let mut r_minor = b(p.r_minor);
        let r_major = b(p.r_major);
        // Radii are positive, so the smallest bin still decodes to a positive value.
        r_minor = r_minor.min(r_major);
        Ok([
            b(p.xc),
            b(p.yc),
            r_major,
            r_minor,
            Self::bin(p.theta_deg, self.angle_width(), self.angle_bins),
        ])
    }

    pub fn from_bins(&self, bins: [u32; 5]) -> Result<BlobParams> {
        for &v in &bins[..4] {
            if v >= self.position_bins {
                return Err(Error::parse(format!("blob bin {v} >= {}", self.position_bins)));
            }
        }
        if bins[4] >= self.angle_bins {
            return Err(Error::parse(format!("angle bin {} >= {}", bins[4], self.angle_bins)));
        }
        if bins[3] > bins[2] {
            return Err(Error::parse("blob minor radius exceeds major radius"));
        }
        let w = self.pos_width();
        let c = |i: u32| (i as f64 + 0.5) * w;
        Ok(BlobParams {
            xc: c(bins[0]),
            yc: c(bins[1]),
            r_major: c(bins[2]),
            r_minor: c(bins[3]),
            theta_deg: (bins[4] as f64 + 0.5) * self.angle_width(),
        })
    }

    /// Bin-center representative of `p`.
    pub fn quantize(&self, p: &BlobParams) -> Result<BlobParams> {
        self.from_bins(self.bins(p)?)
    }

    /// Half-widths of one bin, per field.
    pub fn half_bin(&self) -> [f64; 5] {
        let w = self.pos_width() / 2.0;
        [w, w, w, w, self.angle_width() / 2.0]
    }
}

fn push_int(out: &mut Vec<TokenId>, v: u32, vocab: &Vocab) -> Result<()> {
    for ch in v.to_string().chars() {
        out.push(vocab.digit(ch.to_digit(10).expect("decimal digit"))?);
    }
    Ok(())
}

fn push_tuple(out: &mut Vec<TokenId>, vals: &[u32], vocab: &Vocab) -> Result<()> {
    out.push(vocab.punct('(')?);
    for (i, &v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(vocab.punct(',')?);
        }
        push_int(out, v, vocab)?;
    }
    out.push(vocab.punct(')')?);
    Ok(())
}

/// Tokens of one box: `( x1 , y1 , x2 , y2 )` with digit tokens.
pub fn encode_bbox(b: &BboxParams, vocab: &Vocab) -> Result<Vec<TokenId>> {
    b.validate()?;
    let mut out = Vec::new();
    push_tuple(&mut out, &[b.x1, b.y1, b.x2, b.y2], vocab)?;
    Ok(out)
}

pub fn decode_bbox(tokens: &[TokenId], vocab: &Vocab) -> Result<BboxParams> {
    let mut cur = Cursor::new(tokens, vocab);
    let b = cur.bbox()?;
    cur.finish()?;
    Ok(b)
}

pub fn encode_blob(p: &BlobParams, q: &BlobQuantizer, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let bins = q.bins(p)?;
    let mut out = Vec::new();
    push_tuple(&mut out, &bins, vocab)?;
    Ok(out)
}

pub fn decode_blob(tokens: &[TokenId], q: &BlobQuantizer, vocab: &Vocab) -> Result<BlobParams> {
    let mut cur = Cursor::new(tokens, vocab);
    let bins = cur.tuple::<5>()?;
    cur.finish()?;
    q.from_bins(bins)
}

/// Codebook ids of `x` split into `chunks` equal contiguous pieces, joined by `#`.
pub fn voken_encode(x: &[f64], codebook: &Codebook, chunks: usize, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let ids = codebook.encode_chunks(x, chunks)?;
    voken_tokens(&ids, vocab)
}

pub fn voken_tokens(ids: &[usize], vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(ids.len() * 2);
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(DELIM);
        }
        out.push(vocab.voken_token(id)?);
    }
    Ok(out)
}

/// Concatenated centroids of a `#`-joined voken segment.
pub fn voken_decode(tokens: &[TokenId], codebook: &Codebook, vocab: &Vocab) -> Result<Vec<f64>> {
    let mut cur = Cursor::new(tokens, vocab);
    let ids = cur.vokens()?;
    cur.finish()?;
    codebook.decode(&ids)
}

/// Structured view of a grammar-valid sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LatentContent {
    Text { mode: usize },
    Bbox(Vec<BboxParams>),
    /// Bin indices per blob.
    Blob(Vec<[u32; 5]>),
    Voken(Vec<usize>),
    Combined {
        mode: usize,
        boxes: Vec<BboxParams>,
        vokens: Vec<usize>,
    },
}

impl LatentContent {
    pub fn scheme(&self) -> LatentScheme {
        match self {
            LatentContent::Text { .. } => LatentScheme::Text,
            LatentContent::Bbox(_) => LatentScheme::Bbox,
            LatentContent::Blob(_) => LatentScheme::Blob,
            LatentContent::Voken(_) => LatentScheme::Voken,
            LatentContent::Combined { .. } => LatentScheme::Combined,
        }
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<LatentSequence> {
        let mut out = Vec::new();
        match self {
            LatentContent::Text { mode } => out.push(vocab.mode_token(*mode)?),
            LatentContent::Bbox(boxes) => {
                nonempty(boxes, "bbox")?;
                for b in boxes {
                    out.extend(encode_bbox(b, vocab)?);
                }
            }
            LatentContent::Blob(blobs) => {
                nonempty(blobs, "blob")?;
                for b in blobs {
                    push_tuple(&mut out, b, vocab)?;
                }
            }
            LatentContent::Voken(ids) => {
                nonempty(ids, "voken")?;
                out.extend(voken_tokens(ids, vocab)?);
            }
            LatentContent::Combined { mode, boxes, vokens } => {
                nonempty(boxes, "bbox")?;
                nonempty(vokens, "voken")?;
                out.push(vocab.mode_token(*mode)?);
                out.push(vocab.punct('|')?);
                for b in boxes {
                    out.extend(encode_bbox(b, vocab)?);
                }
                out.push(vocab.punct('|')?);
                out.extend(voken_tokens(vokens, vocab)?);
            }
        }
        out.push(EOS);
        Ok(LatentSequence::new(self.scheme(), out))
    }
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::contract(format!("{what} latent needs at least one element")));
    }
    Ok(())
}

/// Checks `seq` against its scheme grammar and returns the parsed content.
pub fn parse_sequence(seq: &LatentSequence, vocab: &Vocab) -> Result<LatentContent> {
    let mut cur = Cursor::new(&seq.tokens, vocab);
    let content = match seq.scheme {
        LatentScheme::Text => LatentContent::Text { mode: cur.mode()? },
        LatentScheme::Bbox => LatentContent::Bbox(cur.repeated(|c| c.bbox())?),
        LatentScheme::Blob => LatentContent::Blob(cur.repeated(|c| c.tuple::<5>())?),
        LatentScheme::Voken => LatentContent::Voken(cur.vokens()?),
        LatentScheme::Combined => {
            let mode = cur.mode()?;
            cur.expect(vocab.punct('|')?, "'|'")?;
            let boxes = cur.repeated(|c| c.bbox())?;
            cur.expect(vocab.punct('|')?, "'|'")?;
            let vokens = cur.vokens()?;
            LatentContent::Combined { mode, boxes, vokens }
        }
    };
    cur.expect(EOS, "<eos>")?;
    cur.finish()?;
    Ok(content)
}

pub fn is_valid(seq: &LatentSequence, vocab: &Vocab) -> bool {
    parse_sequence(seq, vocab).is_ok()
}

struct Cursor<'a> {
    tokens: &'a [TokenId],
    pos: usize,
    vocab: &'a Vocab,
}

impl<'a> Cursor<'a> {
    fn new(tokens: &'a [TokenId], vocab: &'a Vocab) -> Self {
        Self { tokens, pos: 0, vocab }
    }

    fn peek(&self) -> Option<TokenId> {
        self.tokens.get(self.pos).copied()
    }

    fn err(&self, what: &str) -> Error {
        let found = self
            .peek()
            .map(|t| self.vocab.surface(t).unwrap_or("<unk>").to_string())
            .unwrap_or_else(|| "end of sequence".into());
        Error::parse(format!("expected {what} at token {}, found {found}", self.pos + 1))
    }

    fn expect(&mut self, id: TokenId, what: &str) -> Result<()> {
        if self.peek() == Some(id) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(what))
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.tokens.len() {
            Ok(())
        } else {
            Err(self.err("end of sequence"))
        }
    }

    fn mode(&mut self) -> Result<usize> {
        match self.peek().and_then(|t| self.vocab.as_mode(t)) {
            Some(m) => {
                self.pos += 1;
                Ok(m)
            }
            None => Err(self.err("a mode token")),
        }
    }

    fn int(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut v: u64 = 0;
        while let Some(d) = self.peek().and_then(|t| self.vocab.as_digit(t)) {
            if self.pos > start && v == 0 {
                return Err(self.err("no leading zeros"));
            }
            v = v * 10 + d as u64;
            if v > u32::MAX as u64 {
                return Err(self.err("a smaller integer"));
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("a digit"));
        }
        Ok(v as u32)
    }

    fn tuple<const N: usize>(&mut self) -> Result<[u32; N]> {
        let open = self.vocab.punct('(')?;
        let comma = self.vocab.punct(',')?;
        let close = self.vocab.punct(')')?;
        self.expect(open, "'('")?;
        let mut out = [0u32; N];
        for (i, slot) in out.iter_mut().enumerate() {
            if i > 0 {
                self.expect(comma, "','")?;
            }
            *slot = self.int()?;
        }
        self.expect(close, "')'")?;
        Ok(out)
    }

    fn bbox(&mut self) -> Result<BboxParams> {
        let start = self.pos;
        let [x1, y1, x2, y2] = self.tuple::<4>()?;
        BboxParams::new(x1, y1, x2, y2).map_err(|e| {
            Error::parse(format!("invalid box starting at token {}: {e}", start + 1))
        })
    }

    fn repeated<T>(&mut self, mut item: impl FnMut(&mut Self) -> Result<T>) -> Result<Vec<T>> {
        let open = self.vocab.punct('(')?;
        let mut out = vec![item(self)?];
        while self.peek() == Some(open) {
            out.push(item(self)?);
        }
        Ok(out)
    }

    fn vokens(&mut self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        loop {
            match self.peek().and_then(|t| self.vocab.as_voken(t)) {
                Some(v) => {
                    self.pos += 1;
                    out.push(v);
                }
                None => return Err(self.err("a voken id")),
            }
            if self.peek() == Some(DELIM) {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latents::vocab::VocabSpec;

    fn vocab() -> Vocab {
        Vocab::new(VocabSpec {
            modes: vec!["mode_0A".into(), "mode_0B".into(), "mode_1A".into(), "mode_1B".into()],
            numeric: true,
            vokens: 8,
        })
        .unwrap()
    }

    #[test]
    fn literal_bbox_example_round_trips() {
        let v = vocab();
        let b = BboxParams::new(1, 33, 995, 995).unwrap();
        let toks = encode_bbox(&b, &v).unwrap();
        assert_eq!(v.render(&toks), "( 1 , 3 3 , 9 9 5 , 9 9 5 )");
        let spelled: String = toks.iter().map(|&t| v.surface(t).unwrap()).collect();
        assert_eq!(spelled, "(1,33,995,995)");
        assert_eq!(decode_bbox(&toks, &v).unwrap(), b);
        assert_eq!(b.to_text(), "1, 33, 995, 995");
    }

    #[test]
    fn degenerate_box_round_trips() {
        let v = vocab();
        let b = BboxParams::new(0, 0, 0, 0).unwrap();
        assert_eq!(decode_bbox(&encode_bbox(&b, &v).unwrap(), &v).unwrap(), b);
    }

    #[test]
    fn decode_rejects_swapped_corners() {
        let v = vocab();
        let toks = v.lookup_all("( 9 9 5 , 3 3 , 1 , 9 9 5 )").unwrap();
        assert!(decode_bbox(&toks, &v).is_err());
        assert!(BboxParams::new(0, 0, 1001, 5).is_err());
        let leading_zero = v.lookup_all("( 0 1 , 0 , 5 , 5 )").unwrap();
        assert!(decode_bbox(&leading_zero, &v).is_err());
    }

    #[test]
    fn blob_quantizer_examples() {
        let v = vocab();
        let q = BlobQuantizer::default();
        let circle = BlobParams {
            xc: 300.0,
            yc: 700.0,
            r_major: 50.0,
            r_minor: 50.0,
            theta_deg: 0.0,
        };
        let toks = encode_blob(&circle, &q, &v).unwrap();
        assert_eq!(q.bins(&circle).unwrap()[4], 0);
        let back = decode_blob(&toks, &q, &v).unwrap();
        assert_eq!(encode_blob(&back, &q, &v).unwrap(), toks);

        let p = BlobParams {
            xc: 500.0,
            yc: 500.0,
            r_major: 200.0,
            r_minor: 100.0,
            theta_deg: 90.0,
        };
        let d = decode_blob(&encode_blob(&p, &q, &v).unwrap(), &q, &v).unwrap();
        let half = q.half_bin();
        let diffs = [d.xc - p.xc, d.yc - p.yc, d.r_major - p.r_major, d.r_minor - p.r_minor, d.theta_deg - p.theta_deg];
        for (df, h) in diffs.iter().zip(half) {
            assert!(df.abs() <= h + 1e-12);
        }
    }

    #[test]
    fn blob_invariants_enforced() {
        let v = vocab();
        let q = BlobQuantizer::default();
        let mut p = BlobParams {
            xc: 1.0,
            yc: 1.0,
            r_major: 10.0,
            r_minor: 20.0,
            theta_deg: 0.0,
        };
        assert!(encode_blob(&p, &q, &v).is_err());
        p.r_minor = 5.0;
        p.theta_deg = 180.0;
        assert!(encode_blob(&p, &q, &v).is_err());
    }

    #[test]
    fn scheme_grammars() {
        let v = vocab();
        let ok = |s: LatentScheme, text: &str| parse_sequence(&LatentSequence::new(s, v.lookup_all(text).unwrap()), &v);
        assert_eq!(ok(LatentScheme::Text, "mode_1B <eos>").unwrap(), LatentContent::Text { mode: 3 });
        assert!(ok(LatentScheme::Text, "mode_1B").is_err());
        assert!(ok(LatentScheme::Text, "mode_1B mode_1A <eos>").is_err());
        assert!(ok(LatentScheme::Bbox, "( 1 , 2 , 3 , 4 ) ( 5 , 6 , 7 , 8 ) <eos>").is_ok());
        assert!(ok(LatentScheme::Bbox, "( 1 , 2 , 3 ) <eos>").is_err());
        assert!(ok(LatentScheme::Voken, "v1 # v7 # v0 <eos>").is_ok());
        assert!(ok(LatentScheme::Voken, "v1 # <eos>").is_err());
        assert!(ok(LatentScheme::Combined, "mode_0A | ( 1 , 2 , 3 , 4 ) | v2 # v3 <eos>").is_ok());
        assert!(ok(LatentScheme::Combined, "( 1 , 2 , 3 , 4 ) | mode_0A | v2 <eos>").is_err());
        assert!(ok(LatentScheme::Blob, "( 5 , 5 , 2 , 1 , 9 0 ) <eos>").is_ok());
    }

    #[test]
    fn empty_payload_is_rejected() {
        let v = vocab();
        for s in LatentScheme::ALL {
            assert!(parse_sequence(&LatentSequence::new(s, vec![EOS]), &v).is_err());
        }
    }
}
