use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const DELIM: TokenId = 2;

pub const BOS_SURFACE: &str = "<bos>";
pub const EOS_SURFACE: &str = "<eos>";

/// Which token groups a vocabulary carries. Ids are assigned in a fixed order:
/// `<bos> <eos> #`, then punctuation and digits, then mode labels, then voken ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    /// Mode label tokens such as `mode_1B`.
    pub modes: Vec<String>,
    /// `, ( ) |` and the ten digits.
    pub numeric: bool,
    /// Number of voken ids `v0 .. v{n-1}`.
    pub vokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    spec: VocabSpec,
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
    digit0: Option<TokenId>,
    mode0: TokenId,
    voken0: TokenId,
}

const PUNCT: [&str; 4] = [",", "(", ")", "|"];

impl Vocab {
    pub fn new(spec: VocabSpec) -> Result<Self> {
        let mut surfaces: Vec<String> = vec![BOS_SURFACE.into(), EOS_SURFACE.into(), "#".into()];
        let mut digit0 = None;
        if spec.numeric {
            surfaces.extend(PUNCT.iter().map(|s| s.to_string()));
            digit0 = Some(surfaces.len() as TokenId);
            surfaces.extend((0..10).map(|d| d.to_string()));
        }
        let mode0 = surfaces.len() as TokenId;
        for m in &spec.modes {
            if m.is_empty() || m.chars().any(char::is_whitespace) || m.starts_with('v') && m[1..].parse::<u32>().is_ok() {
                return Err(Error::contract(format!("invalid mode token name {m:?}")));
            }
            surfaces.push(m.clone());
        }
        let voken0 = surfaces.len() as TokenId;
        surfaces.extend((0..spec.vokens).map(|i| format!("v{i}")));
        let mut index = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::contract(format!("duplicate token {s:?}")));
            }
        }
        Ok(Self {
            spec,
            surfaces,
            index,
            digit0,
            mode0,
            voken0,
        })
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn punct(&self, p: char) -> Result<TokenId> {
        let s = p.to_string();
        if !self.spec.numeric {
            return Err(Error::contract("vocabulary has no numeric tokens"));
        }
        self.id(&s).ok_or_else(|| Error::contract(format!("no token for {p:?}")))
    }

    pub fn digit(&self, d: u32) -> Result<TokenId> {
        match self.digit0 {
            Some(z) if d < 10 => Ok(z + d),
            _ => Err(Error::contract("vocabulary has no digit tokens")),
        }
    }

    pub fn as_digit(&self, id: TokenId) -> Option<u32> {
        let z = self.digit0?;
        (id >= z && id < z + 10).then(|| id - z)
    }

    pub fn mode_token(&self, mode: usize) -> Result<TokenId> {
        if mode >= self.spec.modes.len() {
            return Err(Error::contract(format!("mode {mode} has no token")));
        }
        Ok(self.mode0 + mode as TokenId)
    }

    pub fn as_mode(&self, id: TokenId) -> Option<usize> {
        (id >= self.mode0 && id < self.voken0).then(|| (id - self.mode0) as usize)
    }

    pub fn voken_token(&self, code: usize) -> Result<TokenId> {
        if code >= self.spec.vokens {
            return Err(Error::contract(format!(
                "voken id {code} out of range for a codebook of {}",
                self.spec.vokens
            )));
        }
        Ok(self.voken0 + code as TokenId)
    }

    pub fn as_voken(&self, id: TokenId) -> Option<usize> {
        (id >= self.voken0 && (id as usize) < self.surfaces.len()).then(|| (id - self.voken0) as usize)
    }

    /// Space-separated surface forms.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.surface(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`Vocab::render`]; unknown surfaces are reported by position.
    pub fn lookup_all(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, s)| {
                self.id(s)
                    .ok_or_else(|| Error::parse(format!("unknown token {s:?} at position {}", i + 1)))
            })
            .collect()
    }
}
