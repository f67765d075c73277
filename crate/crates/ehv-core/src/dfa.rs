//! DFA compilation from right-linear policy grammars.
//!
//! The pipeline is: grammar -> epsilon-NFA -> subset construction -> trim ->
//! canonical renumbering -> row-compressed transition table with per-state
//! allowed-token sets (sorted id list plus a bitmask over the vocabulary).
//!
//! States are numbered in BFS order from the start state, exploring
//! transitions in ascending token-id order, so compiling the same grammar
//! against the same vocabulary is bit-identical every time: audit records
//! that name a state (`q17`) stay meaningful across replicas and runs.
//!
//! States that cannot reach acceptance are removed together with the
//! transitions into them (the start state is always kept). A missing
//! transition *is* the dead state; masks therefore never admit a token that
//! can no longer complete a valid action.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::crypto::{CanonicalEncoder, Digest};
use crate::grammar::PolicyGrammar;
use crate::vocab::{TokenId, Vocabulary};

/// Default compilation state budget. Policy automata in the target domains
/// sit in the 10^2..10^4 range; exceeding this is a sign the policy should
/// be decomposed, not that the budget should grow.
pub const DEFAULT_STATE_BUDGET: usize = 10_000;

/// Compiled deterministic automaton over the token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfa {
    vocab_size: u32,
    start: u32,
    accepting: Vec<bool>,
    escalating: Vec<bool>,
    /// CSR row offsets, length `states + 1`.
    row_offsets: Vec<u32>,
    /// Token ids, ascending within each row. Doubles as the allowed set.
    col_tokens: Vec<TokenId>,
    /// Transition targets, parallel to `col_tokens`.
    targets: Vec<u32>,
    /// Per-state allowed bitmask, `words_per_state` u64 words per state.
    mask_words: Vec<u64>,
    words_per_state: u32,
    /// Merkle root of the policy set this automaton was compiled from.
    source_root: Digest,
}

/// Sorted-id and bitmask views of one state's allowed token set.
#[derive(Debug, Clone, Copy)]
pub struct AllowedSet<'a> {
    pub ids: &'a [TokenId],
    pub words: &'a [u64],
    pub vocab_size: u32,
}

impl AllowedSet<'_> {
    pub fn contains(&self, token: TokenId) -> bool {
        if token >= self.vocab_size {
            return false;
        }
        self.words[(token / 64) as usize] >> (token % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Result of walking a token sequence from the start state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkOutcome {
    Reached(u32),
    /// The walk fell off the automaton: an undefined transition at `index`.
    /// This is a deny value, not a fault.
    DeadEnd {
        index: usize,
        token: TokenId,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DfaError {
    #[error("unknown state id {0}")]
    UnknownState(u32),
    #[error("terminal {lexeme:?} maps to token id {id}, outside vocabulary of size {vocab}")]
    TerminalOutOfRange {
        lexeme: String,
        id: TokenId,
        vocab: u32,
    },
    #[error(
        "state budget exceeded: {reached} reachable states > budget {budget}; \
         split the policy into independent constraint grammars and apply them \
         as sequential mask intersections (hierarchical decomposition)"
    )]
    StateBudgetExceeded { reached: usize, budget: usize },
    #[error("vocabulary mismatch: expected size {expected}, got {got}")]
    VocabMismatch { expected: u32, got: u32 },
    #[error("intersect requires at least one automaton")]
    EmptyIntersection,
}

/// Compilation knobs. `source_root` defaults to the digest of the grammar's
/// canonical form; the policy store passes its own Merkle root instead.
#[derive(Debug, Clone)]
pub struct CompileOptions {
    pub state_budget: usize,
    pub source_root: Option<Digest>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            state_budget: DEFAULT_STATE_BUDGET,
            source_root: None,
        }
    }
}

// ---------------------------------------------------------------------------
// NFA construction
// ---------------------------------------------------------------------------

#[derive(Default, Clone)]
struct NfaState {
    eps: Vec<usize>,
    trans: Vec<(TokenId, usize)>,
    accepting: bool,
    escalating: bool,
}

struct Nfa {
    states: Vec<NfaState>,
    start: usize,
}

fn state_for(
    name: &str,
    nt_state: &mut BTreeMap<String, usize>,
    states: &mut Vec<NfaState>,
) -> usize {
    if let Some(&s) = nt_state.get(name) {
        return s;
    }
    states.push(NfaState::default());
    let idx = states.len() - 1;
    nt_state.insert(name.to_string(), idx);
    idx
}

fn build_nfa(grammar: &PolicyGrammar, vocab: &Vocabulary) -> Result<Nfa, DfaError> {
    let mut states: Vec<NfaState> = Vec::new();
    let mut nt_state: BTreeMap<String, usize> = BTreeMap::new();

    let Some(start_name) = grammar.start_symbol() else {
        // Empty rule set: accept exactly the empty action.
        return Ok(Nfa {
            states: vec![NfaState {
                accepting: true,
                ..NfaState::default()
            }],
            start: 0,
        });
    };
    let start = state_for(start_name, &mut nt_state, &mut states);

    for (idx, rule) in grammar.rules.iter().enumerate() {
        let flagged = grammar.escalate_marks.contains(&idx);
        let entry = state_for(&rule.lhs, &mut nt_state, &mut states);

        // Result state: reached exactly when this production's terminals have
        // all been consumed. Escalation is a property of arriving here.
        states.push(NfaState {
            accepting: rule.next.is_none(),
            escalating: flagged,
            ..NfaState::default()
        });
        let result = states.len() - 1;
        if let Some(next) = &rule.next {
            let target = state_for(next, &mut nt_state, &mut states);
            states[result].eps.push(target);
        }

        let mut cursor = entry;
        let terminal_ids: Vec<TokenId> = rule
            .terminals
            .iter()
            .map(|lexeme| {
                let id = grammar.terminal_map[lexeme];
                if !vocab.contains(id) {
                    return Err(DfaError::TerminalOutOfRange {
                        lexeme: lexeme.clone(),
                        id,
                        vocab: vocab.size(),
                    });
                }
                Ok(id)
            })
            .collect::<Result<_, _>>()?;
        if terminal_ids.is_empty() {
            states[cursor].eps.push(result);
        } else {
            for (i, &token) in terminal_ids.iter().enumerate() {
                let target = if i == terminal_ids.len() - 1 {
                    result
                } else {
                    states.push(NfaState::default());
                    states.len() - 1
                };
                states[cursor].trans.push((token, target));
                cursor = target;
            }
        }
    }

    Ok(Nfa { states, start })
}

fn eps_closure(nfa: &Nfa, seed: &[usize]) -> Vec<usize> {
    let mut set: BTreeSet<usize> = seed.iter().copied().collect();
    let mut stack: Vec<usize> = seed.to_vec();
    while let Some(s) = stack.pop() {
        for &e in &nfa.states[s].eps {
            if set.insert(e) {
                stack.push(e);
            }
        }
    }
    set.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Raw deterministic automaton, pre-trim
// ---------------------------------------------------------------------------

struct RawDfa {
    start: usize,
    accepting: Vec<bool>,
    escalating: Vec<bool>,
    trans: Vec<BTreeMap<TokenId, usize>>,
}

fn subset_construct(nfa: &Nfa, budget: usize) -> Result<RawDfa, DfaError> {
    let start_set = eps_closure(nfa, &[nfa.start]);
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut sets: Vec<Vec<usize>> = vec![start_set.clone()];
    index.insert(start_set, 0);
    let mut trans: Vec<BTreeMap<TokenId, usize>> = vec![BTreeMap::new()];

    let mut queue = VecDeque::from([0usize]);
    while let Some(d) = queue.pop_front() {
        let members = sets[d].clone();
        let mut moves: BTreeMap<TokenId, Vec<usize>> = BTreeMap::new();
        for &s in &members {
            for &(token, target) in &nfa.states[s].trans {
                moves.entry(token).or_default().push(target);
            }
        }
        for (token, seeds) in moves {
            let closure = eps_closure(nfa, &seeds);
            let next = match index.get(&closure) {
                Some(&i) => i,
                None => {
                    let i = sets.len();
                    if i >= budget {
                        return Err(DfaError::StateBudgetExceeded {
                            reached: i + 1,
                            budget,
                        });
                    }
                    sets.push(closure.clone());
                    index.insert(closure, i);
                    trans.push(BTreeMap::new());
                    queue.push_back(i);
                    i
                }
            };
            trans[d].insert(token, next);
        }
    }
    let accepting = sets
        .iter()
        .map(|m| m.iter().any(|&s| nfa.states[s].accepting))
        .collect();
    let escalating = sets
        .iter()
        .map(|m| m.iter().any(|&s| nfa.states[s].escalating))
        .collect();
    Ok(RawDfa {
        start: 0,
        accepting,
        escalating,
        trans,
    })
}

/// Trim non-co-accessible states, renumber in BFS order (ascending token
/// tie-break) and pack into CSR form.
fn finish(raw: RawDfa, vocab_size: u32, source_root: Digest) -> Dfa {
    let n = raw.trans.len();

    // Co-accessible: reverse reachability from accepting states.
    let mut keep = vec![false; n];
    let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (from, row) in raw.trans.iter().enumerate() {
        for &to in row.values() {
            reverse[to].push(from);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&s| raw.accepting[s]).collect();
    for &s in &queue {
        keep[s] = true;
    }
    while let Some(s) = queue.pop_front() {
        for &p in &reverse[s] {
            if !keep[p] {
                keep[p] = true;
                queue.push_back(p);
            }
        }
    }
    keep[raw.start] = true;

    // Canonical renumbering over the kept subgraph.
    let mut renumber: HashMap<usize, u32> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    let mut queue = VecDeque::from([raw.start]);
    renumber.insert(raw.start, 0);
    order.push(raw.start);
    while let Some(s) = queue.pop_front() {
        for &to in raw.trans[s].values() {
            if keep[to] && !renumber.contains_key(&to) {
                renumber.insert(to, order.len() as u32);
                order.push(to);
                queue.push_back(to);
            }
        }
    }

    let states = order.len();
    let words_per_state = vocab_size.div_ceil(64);
    let mut accepting = Vec::with_capacity(states);
    let mut escalating = Vec::with_capacity(states);
    let mut row_offsets = Vec::with_capacity(states + 1);
    let mut col_tokens = Vec::new();
    let mut targets = Vec::new();
    let mut mask_words = vec![0u64; states * words_per_state as usize];

    row_offsets.push(0);
    for (new_id, &old) in order.iter().enumerate() {
        accepting.push(raw.accepting[old]);
        escalating.push(raw.escalating[old]);
        for (&token, &to) in raw.trans[old].iter() {
            if !keep[to] {
                continue;
            }
            col_tokens.push(token);
            targets.push(renumber[&to]);
            let base = new_id * words_per_state as usize;
            mask_words[base + (token / 64) as usize] |= 1u64 << (token % 64);
        }
        row_offsets.push(col_tokens.len() as u32);
    }

    Dfa {
        vocab_size,
        start: 0,
        accepting,
        escalating,
        row_offsets,
        col_tokens,
        targets,
        mask_words,
        words_per_state,
        source_root,
    }
}

/// Compile a validated grammar against a vocabulary with default options.
pub fn compile(grammar: &PolicyGrammar, vocab: &Vocabulary) -> Result<Dfa, DfaError> {
    compile_with(grammar, vocab, &CompileOptions::default())
}

/// Compile with an explicit state budget and/or policy root binding.
pub fn compile_with(
    grammar: &PolicyGrammar,
    vocab: &Vocabulary,
    options: &CompileOptions,
) -> Result<Dfa, DfaError> {
    let nfa = build_nfa(grammar, vocab)?;
    let raw = subset_construct(&nfa, options.state_budget)?;
    let root = options
        .source_root
        .unwrap_or_else(|| grammar.canonical_digest());
    Ok(finish(raw, vocab.size(), root))
}

/// Outcome of [`intersect`]: either the product automaton, or the ordered
/// inputs to be applied as sequential per-step mask intersections when the
/// product would exceed the state budget.
#[derive(Debug, Clone)]
pub enum Intersection {
    Product(Dfa),
    Plan(DecompositionPlan),
}

/// Ordered automata applied jointly, masking with the intersection of the
/// per-automaton allowed sets at each step.
#[derive(Debug, Clone)]
pub struct DecompositionPlan {
    pub dfas: Vec<Dfa>,
}

impl DecompositionPlan {
    pub fn cursor(&self) -> PlanCursor<'_> {
        PlanCursor {
            plan: self,
            states: self.dfas.iter().map(|d| d.start()).collect(),
        }
    }
}

/// Parallel walk over every automaton of a [`DecompositionPlan`].
pub struct PlanCursor<'a> {
    plan: &'a DecompositionPlan,
    states: Vec<u32>,
}

impl PlanCursor<'_> {
    /// Tokens allowed by every automaton at the current joint state.
    pub fn allowed_intersection(&self) -> Vec<TokenId> {
        let first = self.plan.dfas[0]
            .allowed(self.states[0])
            .expect("cursor state valid");
        first
            .ids
            .iter()
            .copied()
            .filter(|&t| {
                self.plan.dfas[1..]
                    .iter()
                    .zip(&self.states[1..])
                    .all(|(d, &q)| d.transition(q, t).is_some())
            })
            .collect()
    }

    /// Advance every automaton; false (and no movement) if any rejects.
    pub fn step(&mut self, token: TokenId) -> bool {
        let mut next = Vec::with_capacity(self.states.len());
        for (d, &q) in self.plan.dfas.iter().zip(&self.states) {
            match d.transition(q, token) {
                Some(t) => next.push(t),
                None => return false,
            }
        }
        self.states = next;
        true
    }

    pub fn accepting(&self) -> bool {
        self.plan
            .dfas
            .iter()
            .zip(&self.states)
            .all(|(d, &q)| d.is_accepting(q))
    }
}

/// Product construction under a state budget. Inputs must share one
/// vocabulary. A single input is returned unchanged.
pub fn intersect(dfas: &[Dfa], budget: usize) -> Result<Intersection, DfaError> {
    let Some(first) = dfas.first() else {
        return Err(DfaError::EmptyIntersection);
    };
    for d in &dfas[1..] {
        if d.vocab_size != first.vocab_size {
            return Err(DfaError::VocabMismatch {
                expected: first.vocab_size,
                got: d.vocab_size,
            });
        }
    }
    if dfas.len() == 1 {
        return Ok(Intersection::Product(first.clone()));
    }

    let start: Vec<u32> = dfas.iter().map(|d| d.start()).collect();
    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut tuples: Vec<Vec<u32>> = vec![start.clone()];
    index.insert(start, 0);
    let mut trans: Vec<BTreeMap<TokenId, usize>> = vec![BTreeMap::new()];
    let mut queue = VecDeque::from([0usize]);

    while let Some(p) = queue.pop_front() {
        let tuple = tuples[p].clone();
        // Candidate tokens come from the narrowest component row.
        let narrow = dfas
            .iter()
            .zip(&tuple)
            .min_by_key(|(d, &q)| d.allowed(q).map_or(0, |a| a.len()))
            .expect("non-empty");
        let candidates: Vec<TokenId> = narrow
            .0
            .allowed(*narrow.1)
            .expect("valid state")
            .ids
            .to_vec();
        for token in candidates {
            let mut next_tuple = Vec::with_capacity(tuple.len());
            let mut ok = true;
            for (d, &q) in dfas.iter().zip(&tuple) {
                match d.transition(q, token) {
                    Some(t) => next_tuple.push(t),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let next = match index.get(&next_tuple) {
                Some(&i) => i,
                None => {
                    let i = tuples.len();
                    if i >= budget {
                        return Ok(Intersection::Plan(DecompositionPlan {
                            dfas: dfas.to_vec(),
                        }));
                    }
                    tuples.push(next_tuple.clone());
                    index.insert(next_tuple, i);
                    trans.push(BTreeMap::new());
                    queue.push_back(i);
                    i
                }
            };
            trans[p].insert(token, next);
        }
    }

    let accepting = tuples
        .iter()
        .map(|t| dfas.iter().zip(t).all(|(d, &q)| d.is_accepting(q)))
        .collect();
    let escalating = tuples
        .iter()
        .map(|t| dfas.iter().zip(t).any(|(d, &q)| d.is_escalating(q)))
        .collect();

    let root = if dfas.iter().all(|d| d.source_root() == first.source_root()) {
        first.source_root()
    } else {
        let mut enc = CanonicalEncoder::new();
        for d in dfas {
            enc.digest(&d.source_root());
        }
        crate::crypto::tagged_digest("ehv.dfa.product", &enc.finish())
    };

    Ok(Intersection::Product(finish(
        RawDfa {
            start: 0,
            accepting,
            escalating,
            trans,
        },
        first.vocab_size,
        root,
    )))
}

impl Dfa {
    pub fn state_count(&self) -> usize {
        self.accepting.len()
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn source_root(&self) -> Digest {
        self.source_root
    }

    pub fn is_accepting(&self, q: u32) -> bool {
        self.accepting.get(q as usize).copied().unwrap_or(false)
    }

    pub fn is_escalating(&self, q: u32) -> bool {
        self.escalating.get(q as usize).copied().unwrap_or(false)
    }

    /// Transition lookup: O(log out-degree) within the state's CSR row,
    /// independent of the total state count.
    pub fn transition(&self, q: u32, token: TokenId) -> Option<u32> {
        let (lo, hi) = self.row_bounds(q)?;
        let row = &self.col_tokens[lo..hi];
        let pos = row.binary_search(&token).ok()?;
        Some(self.targets[lo + pos])
    }

    /// The exact set of tokens with defined transitions from `q`.
    pub fn allowed(&self, q: u32) -> Result<AllowedSet<'_>, DfaError> {
        let (lo, hi) = self.row_bounds(q).ok_or(DfaError::UnknownState(q))?;
        let w = self.words_per_state as usize;
        Ok(AllowedSet {
            ids: &self.col_tokens[lo..hi],
            words: &self.mask_words[q as usize * w..(q as usize + 1) * w],
            vocab_size: self.vocab_size,
        })
    }

    /// Successor states of `q`, deduplicated, ascending.
    pub fn successors(&self, q: u32) -> Vec<u32> {
        let Some((lo, hi)) = self.row_bounds(q) else {
            return Vec::new();
        };
        let mut succ: Vec<u32> = self.targets[lo..hi].to_vec();
        succ.sort_unstable();
        succ.dedup();
        succ
    }

    fn row_bounds(&self, q: u32) -> Option<(usize, usize)> {
        let q = q as usize;
        if q + 1 >= self.row_offsets.len() {
            return None;
        }
        Some((
            self.row_offsets[q] as usize,
            self.row_offsets[q + 1] as usize,
        ))
    }

    /// Walk a token sequence from the start state.
    pub fn walk(&self, tokens: &[TokenId]) -> WalkOutcome {
        self.walk_from(self.start, tokens)
    }

    /// Walk a token sequence from an arbitrary state.
    pub fn walk_from(&self, mut q: u32, tokens: &[TokenId]) -> WalkOutcome {
        for (index, &token) in tokens.iter().enumerate() {
            match self.transition(q, token) {
                Some(next) => q = next,
                None => return WalkOutcome::DeadEnd { index, token },
            }
        }
        WalkOutcome::Reached(q)
    }

    pub fn accepts(&self, tokens: &[TokenId]) -> bool {
        matches!(self.walk(tokens), WalkOutcome::Reached(q) if self.is_accepting(q))
    }
}
