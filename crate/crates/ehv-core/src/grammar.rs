//! Policy grammar parsing and validation.
//!
//! A policy is written in a line-oriented grammar file:
//!
//! ```text
//! # dosage policy, ceiling 0.75
//! grammar vincristine 2
//! token "administer" = 0
//! token "0.5" = 3
//! token "mg/m2" = 8
//! token "<eoa>" = 10
//! rule Action -> "administer" Dose
//! rule Dose -> "0.5" Unit
//! rule Unit -> "mg/m2" End
//! rule End -> "<eoa>"
//! escalate Review
//! ```
//!
//! Directives: `grammar <name> <version>` names the policy; `token
//! "<lexeme>" = <id>` declares the vocabulary mapping; `rule <NT> -> <sym>
//! ...` adds a production (terminals quoted, nonterminals bare, an empty
//! right-hand side is an epsilon production); `escalate <NT>` flags every
//! production of `<NT>` as requiring human escalation. The start symbol is
//! the left-hand side of the first rule. `#` starts a comment.
//!
//! Only right-linear productions are accepted: any number of terminals
//! followed by at most one trailing nonterminal. Anything else (left
//! recursion, center embedding, two nonterminals) is rejected at parse time,
//! which is what makes the DFA compilation guarantee honest. A grammar with
//! no rules accepts exactly the empty action.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{CanonicalEncoder, Digest};
use crate::vocab::TokenId;

/// One grammar symbol: a quoted terminal or a bare nonterminal name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Symbol {
    Terminal(String),
    NonTerminal(String),
}

/// A production `lhs -> rhs...`, rhs already validated right-linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub lhs: String,
    /// Terminal lexemes before the optional trailing nonterminal.
    pub terminals: Vec<String>,
    /// Trailing nonterminal, if any.
    pub next: Option<String>,
}

/// A parsed, validated policy grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyGrammar {
    pub name: String,
    pub version: u64,
    pub rules: Vec<Production>,
    /// Terminal lexeme -> token id, from the file's `token` declarations.
    pub terminal_map: BTreeMap<String, TokenId>,
    /// Indices into `rules` flagged for human escalation.
    pub escalate_marks: BTreeSet<usize>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unresolved terminal {lexeme:?} (no token declaration)")]
    UnresolvedTerminal { line: usize, lexeme: String },
    #[error(
        "line {line}: non-regular construction in rule for {rule}: {message}; \
         only right-linear productions (terminals then at most one trailing \
         nonterminal) are enforceable"
    )]
    NonRegular {
        line: usize,
        rule: String,
        message: String,
    },
    #[error("token declaration conflict: {lexeme:?} maps to both {first} and {second}")]
    TokenConflict {
        lexeme: String,
        first: TokenId,
        second: TokenId,
    },
}

/// Parse `token "<lexeme>" = <id>`; shared with the vocab file parser.
pub(crate) fn parse_token_decl(line: &str) -> Result<(String, TokenId), String> {
    let rest = line
        .strip_prefix("token")
        .ok_or_else(|| "expected token declaration".to_string())?
        .trim();
    let (lexeme, tail) = parse_quoted(rest)
        .ok_or_else(|| format!("expected quoted lexeme after `token`, got {rest:?}"))?;
    let tail = tail.trim();
    let id_text = tail
        .strip_prefix('=')
        .ok_or_else(|| format!("expected `=` after lexeme, got {tail:?}"))?
        .trim();
    let id = id_text
        .parse::<TokenId>()
        .map_err(|e| format!("bad token id {id_text:?}: {e}"))?;
    Ok((lexeme, id))
}

/// Parse a leading double-quoted string, returning (contents, remainder).
/// `\"` and `\\` escapes are honored.
fn parse_quoted(text: &str) -> Option<(String, &str)> {
    let rest = text.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = rest.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Some((out, &rest[i + 1..])),
            '\\' => {
                let (_, escaped) = chars.next()?;
                out.push(escaped);
            }
            _ => out.push(c),
        }
    }
    None
}

/// Parse and validate a grammar source document.
pub fn parse_grammar(text: &str) -> Result<PolicyGrammar, GrammarError> {
    let mut name = "policy".to_string();
    let mut version: u64 = 1;
    let mut terminal_map: BTreeMap<String, TokenId> = BTreeMap::new();
    let mut rules: Vec<(usize, Production)> = Vec::new();
    let mut escalate_nts: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = strip_comment(raw).trim();
        if stripped.is_empty() {
            continue;
        }
        let syntax = |message: String| GrammarError::Syntax { line, message };

        if let Some(rest) = stripped.strip_prefix("grammar ") {
            let mut parts = rest.split_whitespace();
            name = parts
                .next()
                .ok_or_else(|| syntax("missing grammar name".into()))?
                .to_string();
            version = parts
                .next()
                .ok_or_else(|| syntax("missing grammar version".into()))?
                .parse()
                .map_err(|e| syntax(format!("bad version: {e}")))?;
            if let Some(extra) = parts.next() {
                return Err(syntax(format!("unexpected trailing {extra:?}")));
            }
        } else if stripped.starts_with("token ") {
            let (lexeme, id) = parse_token_decl(stripped).map_err(&syntax)?;
            if let Some(&first) = terminal_map.get(&lexeme) {
                if first != id {
                    return Err(GrammarError::TokenConflict {
                        lexeme,
                        first,
                        second: id,
                    });
                }
            } else {
                terminal_map.insert(lexeme, id);
            }
        } else if let Some(rest) = stripped.strip_prefix("rule ") {
            rules.push((line, parse_rule(rest, line)?));
        } else if let Some(rest) = stripped.strip_prefix("escalate ") {
            let nt = rest.trim();
            if nt.is_empty() || nt.contains(char::is_whitespace) {
                return Err(syntax(format!("expected one nonterminal, got {rest:?}")));
            }
            escalate_nts.insert(nt.to_string());
        } else {
            return Err(syntax(format!("unrecognized directive: {stripped:?}")));
        }
    }

    // Every terminal must resolve to a token id.
    for (line, rule) in &rules {
        for lexeme in &rule.terminals {
            if !terminal_map.contains_key(lexeme) {
                return Err(GrammarError::UnresolvedTerminal {
                    line: *line,
                    lexeme: lexeme.clone(),
                });
            }
        }
    }

    let rules: Vec<Production> = rules.into_iter().map(|(_, r)| r).collect();
    let escalate_marks = rules
        .iter()
        .enumerate()
        .filter(|(_, r)| escalate_nts.contains(&r.lhs))
        .map(|(i, _)| i)
        .collect();

    Ok(PolicyGrammar {
        name,
        version,
        rules,
        terminal_map,
        escalate_marks,
    })
}

fn strip_comment(line: &str) -> &str {
    // `#` inside a quoted terminal does not start a comment.
    let mut in_quote = false;
    let mut prev_backslash = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' if !prev_backslash => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
        prev_backslash = c == '\\' && !prev_backslash;
    }
    line
}

fn parse_rule(rest: &str, line: usize) -> Result<Production, GrammarError> {
    let syntax = |message: String| GrammarError::Syntax { line, message };
    let (lhs, rhs_text) = rest
        .split_once("->")
        .ok_or_else(|| syntax("rule is missing `->`".into()))?;
    let lhs = lhs.trim();
    if lhs.is_empty() || lhs.contains(char::is_whitespace) || lhs.starts_with('"') {
        return Err(syntax(format!("bad rule left-hand side {lhs:?}")));
    }

    let mut symbols = Vec::new();
    let mut cursor = rhs_text.trim_start();
    while !cursor.is_empty() {
        if cursor.starts_with('"') {
            let (lexeme, tail) = parse_quoted(cursor)
                .ok_or_else(|| syntax("unterminated quoted terminal".into()))?;
            symbols.push(Symbol::Terminal(lexeme));
            cursor = tail.trim_start();
        } else {
            let end = cursor.find(char::is_whitespace).unwrap_or(cursor.len());
            symbols.push(Symbol::NonTerminal(cursor[..end].to_string()));
            cursor = cursor[end..].trim_start();
        }
    }

    // Right-linearity: terminals only, then at most one trailing nonterminal.
    let mut terminals = Vec::new();
    let mut next = None;
    for (i, sym) in symbols.iter().enumerate() {
        match sym {
            Symbol::Terminal(t) => {
                if next.is_some() {
                    return Err(GrammarError::NonRegular {
                        line,
                        rule: lhs.to_string(),
                        message: format!("terminal {t:?} appears after nonterminal"),
                    });
                }
                terminals.push(t.clone());
            }
            Symbol::NonTerminal(nt) => {
                if next.is_some() {
                    return Err(GrammarError::NonRegular {
                        line,
                        rule: lhs.to_string(),
                        message: format!("second nonterminal {nt:?} (self-embedding or branching)"),
                    });
                }
                if i != symbols.len() - 1 {
                    return Err(GrammarError::NonRegular {
                        line,
                        rule: lhs.to_string(),
                        message: format!("nonterminal {nt:?} is not in tail position"),
                    });
                }
                next = Some(nt.clone());
            }
        }
    }

    Ok(Production {
        lhs: lhs.to_string(),
        terminals,
        next,
    })
}

impl PolicyGrammar {
    /// Start symbol: the first rule's left-hand side. `None` for the empty
    /// rule set, which accepts exactly the empty action.
    pub fn start_symbol(&self) -> Option<&str> {
        self.rules.first().map(|r| r.lhs.as_str())
    }

    /// Resolve a production's terminals to token ids. Panics only if called
    /// on an unvalidated grammar; `parse_grammar` guarantees resolution.
    pub fn terminal_ids(&self, rule: &Production) -> Vec<TokenId> {
        rule.terminals
            .iter()
            .map(|t| self.terminal_map[t])
            .collect()
    }

    /// Whether `tokens` is derivable from the start symbol by direct
    /// application of the productions. This is the grammar-level validity
    /// check used by the state-space explorer; it shares no code with the
    /// compiled DFA path.
    pub fn derives(&self, tokens: &[TokenId]) -> bool {
        let Some(start) = self.start_symbol() else {
            return tokens.is_empty();
        };
        let mut seen = BTreeSet::new();
        let mut stack = vec![(0usize, start.to_string())];
        while let Some((pos, nt)) = stack.pop() {
            if !seen.insert((pos, nt.clone())) {
                continue;
            }
            for rule in self.rules.iter().filter(|r| r.lhs == nt) {
                let ids = self.terminal_ids(rule);
                if pos + ids.len() > tokens.len() {
                    continue;
                }
                if tokens[pos..pos + ids.len()] != ids[..] {
                    continue;
                }
                let end = pos + ids.len();
                match &rule.next {
                    Some(next) => stack.push((end, next.clone())),
                    None => {
                        if end == tokens.len() {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Canonical rendering of the grammar structure, independent of source
    /// formatting and comments. Hashing this gives the default policy root
    /// for a standalone compilation.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new();
        enc.str(&self.name).u64(self.version);
        enc.u32(self.terminal_map.len() as u32);
        for (lexeme, id) in &self.terminal_map {
            enc.str(lexeme).u32(*id);
        }
        enc.u32(self.rules.len() as u32);
        for (i, rule) in self.rules.iter().enumerate() {
            enc.str(&rule.lhs);
            enc.u32(rule.terminals.len() as u32);
            for t in &rule.terminals {
                enc.str(t);
            }
            match &rule.next {
                Some(nt) => enc.u32(1).str(nt),
                None => enc.u32(0),
            };
            enc.u32(u32::from(self.escalate_marks.contains(&i)));
        }
        enc.finish()
    }

    pub fn canonical_digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }
}
