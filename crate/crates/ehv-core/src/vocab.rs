//! Token vocabulary: dense token ids in `[0, |V|)` with optional lexemes
//! for diagnostics and grammar-file round trips.

use std::collections::BTreeMap;

use thiserror::Error;

/// Token id into the decoding vocabulary.
pub type TokenId = u32;

/// A decoding vocabulary of `size` dense token ids. Lexemes are optional;
/// when present they are used for parsing grammar terminals and for
/// human-readable trace output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
    lexemes: BTreeMap<TokenId, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: u32 },
    #[error("lexeme {lexeme:?} declared twice with ids {first} and {second}")]
    ConflictingLexeme {
        lexeme: String,
        first: TokenId,
        second: TokenId,
    },
    #[error("vocab file line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Vocabulary {
    /// Anonymous vocabulary of `size` tokens, no lexemes.
    pub fn anonymous(size: u32) -> Self {
        Self {
            size,
            lexemes: BTreeMap::new(),
        }
    }

    /// Build from `(lexeme, id)` declarations. `size` defaults to
    /// `max id + 1` but may be declared larger to model a bigger model
    /// vocabulary than the grammar touches.
    pub fn from_declarations(
        decls: impl IntoIterator<Item = (String, TokenId)>,
        declared_size: Option<u32>,
    ) -> Result<Self, VocabError> {
        let mut by_lexeme: BTreeMap<String, TokenId> = BTreeMap::new();
        let mut lexemes = BTreeMap::new();
        let mut max_id = None;
        for (lexeme, id) in decls {
            if let Some(&first) = by_lexeme.get(&lexeme) {
                if first != id {
                    return Err(VocabError::ConflictingLexeme {
                        lexeme,
                        first,
                        second: id,
                    });
                }
                continue;
            }
            by_lexeme.insert(lexeme.clone(), id);
            lexemes.insert(id, lexeme);
            max_id = Some(max_id.map_or(id, |m: TokenId| m.max(id)));
        }
        let min_size = max_id.map_or(0, |m| m + 1);
        let size = declared_size.unwrap_or(min_size);
        if size < min_size {
            return Err(VocabError::IdOutOfRange {
                id: max_id.unwrap(),
                size,
            });
        }
        Ok(Self { size, lexemes })
    }

    /// Parse the vocab file format: one declaration per line, `#` comments.
    ///
    /// ```text
    /// size 50000
    /// token "administer" = 0
    /// token "0.75" = 4
    /// ```
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut decls = Vec::new();
        let mut declared_size = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            if let Some(rest) = stripped.strip_prefix("size ") {
                declared_size =
                    Some(rest.trim().parse::<u32>().map_err(|e| VocabError::Parse {
                        line,
                        message: format!("bad size: {e}"),
                    })?);
            } else if stripped.starts_with("token ") {
                let (lexeme, id) = crate::grammar::parse_token_decl(stripped)
                    .map_err(|message| VocabError::Parse { line, message })?;
                decls.push((lexeme, id));
            } else {
                return Err(VocabError::Parse {
                    line,
                    message: format!("unrecognized directive: {stripped:?}"),
                });
            }
        }
        Self::from_declarations(decls, declared_size)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.size
    }

    pub fn lexeme(&self, id: TokenId) -> Option<&str> {
        self.lexemes.get(&id).map(String::as_str)
    }

    pub fn id_of(&self, lexeme: &str) -> Option<TokenId> {
        self.lexemes
            .iter()
            .find(|(_, l)| l.as_str() == lexeme)
            .map(|(&id, _)| id)
    }

    /// Render a token sequence using lexemes where known.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| {
                self.lexeme(t)
                    .map_or_else(|| format!("<{t}>"), str::to_owned)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
