//! Clinical dosage fixtures shared by tests, the simulator, and the
//! explorer: a small action vocabulary and a versioned family of dosage
//! policies with decreasing ceilings.

use crate::vocab::{TokenId, Vocabulary};

pub const TOK_ADMINISTER: TokenId = 0;
pub const TOK_DOSE_0_0: TokenId = 1;
pub const TOK_DOSE_0_25: TokenId = 2;
pub const TOK_DOSE_0_5: TokenId = 3;
pub const TOK_DOSE_0_75: TokenId = 4;
pub const TOK_DOSE_1_0: TokenId = 5;
pub const TOK_DOSE_1_25: TokenId = 6;
pub const TOK_DOSE_1_5: TokenId = 7;
pub const TOK_UNIT: TokenId = 8;
pub const TOK_ESCALATE_CASE: TokenId = 9;
pub const TOK_END_OF_ACTION: TokenId = 10;

pub const CLINICAL_VOCAB_SIZE: u32 = 11;

const DOSE_LEXEMES: [(&str, TokenId); 7] = [
    ("0.0", TOK_DOSE_0_0),
    ("0.25", TOK_DOSE_0_25),
    ("0.5", TOK_DOSE_0_5),
    ("0.75", TOK_DOSE_0_75),
    ("1.0", TOK_DOSE_1_0),
    ("1.25", TOK_DOSE_1_25),
    ("1.5", TOK_DOSE_1_5),
];

/// Dose ceiling per policy version (1-based). Version 1 permits the legacy
/// 1.5 ceiling; version 2 drops it to 0.75; later versions tighten further.
pub const VERSION_CEILINGS: [&str; 5] = ["1.5", "0.75", "0.5", "0.25", "0.0"];

/// The eleven-token clinical action vocabulary.
pub fn clinical_vocab() -> Vocabulary {
    let decls = [
        ("administer", TOK_ADMINISTER),
        ("0.0", TOK_DOSE_0_0),
        ("0.25", TOK_DOSE_0_25),
        ("0.5", TOK_DOSE_0_5),
        ("0.75", TOK_DOSE_0_75),
        ("1.0", TOK_DOSE_1_0),
        ("1.25", TOK_DOSE_1_25),
        ("1.5", TOK_DOSE_1_5),
        ("mg/m2", TOK_UNIT),
        ("escalate_case", TOK_ESCALATE_CASE),
        ("<eoa>", TOK_END_OF_ACTION),
    ];
    Vocabulary::from_declarations(
        decls.into_iter().map(|(l, i)| (l.to_string(), i)),
        Some(CLINICAL_VOCAB_SIZE),
    )
    .expect("fixture vocab is valid")
}

/// Vocab file body matching [`clinical_vocab`].
pub fn clinical_vocab_source() -> String {
    let mut out = String::from("# clinical action vocabulary\nsize 11\n");
    let v = clinical_vocab();
    for id in 0..CLINICAL_VOCAB_SIZE {
        out.push_str(&format!("token \"{}\" = {id}\n", v.lexeme(id).unwrap()));
    }
    out
}

/// Grammar source for the dosage policy at `version` (1..=5), permitting
/// doses up to that version's ceiling, plus the escalation action.
pub fn dosage_grammar_source(version: u64) -> String {
    let ceiling = VERSION_CEILINGS[(version as usize - 1).min(VERSION_CEILINGS.len() - 1)];
    let ceiling_val: f64 = ceiling.parse().expect("numeric ceiling");
    let mut out = format!("# dosage policy, ceiling {ceiling} mg/m2\n");
    out.push_str(&format!("grammar vincristine {version}\n"));
    out.push_str("token \"administer\" = 0\n");
    for (lexeme, id) in DOSE_LEXEMES {
        out.push_str(&format!("token \"{lexeme}\" = {id}\n"));
    }
    out.push_str("token \"mg/m2\" = 8\n");
    out.push_str("token \"escalate_case\" = 9\n");
    out.push_str("token \"<eoa>\" = 10\n");
    out.push_str("rule Action -> \"administer\" Dose\n");
    out.push_str("rule Action -> \"escalate_case\" Review\n");
    for (lexeme, _) in DOSE_LEXEMES {
        let v: f64 = lexeme.parse().expect("numeric dose");
        if v <= ceiling_val {
            out.push_str(&format!("rule Dose -> \"{lexeme}\" Unit\n"));
        }
    }
    out.push_str("rule Unit -> \"mg/m2\" End\n");
    out.push_str("rule End -> \"<eoa>\"\n");
    out.push_str("rule Review -> \"<eoa>\"\n");
    out.push_str("escalate Review\n");
    out
}

/// A dose held at zero: derivable under every policy version.
pub fn safe_dosage_action() -> Vec<TokenId> {
    vec![TOK_ADMINISTER, TOK_DOSE_0_0, TOK_UNIT, TOK_END_OF_ACTION]
}

/// The legacy 1.5 dose: derivable only under version 1.
pub fn unsafe_dosage_action() -> Vec<TokenId> {
    vec![TOK_ADMINISTER, TOK_DOSE_1_5, TOK_UNIT, TOK_END_OF_ACTION]
}

/// Hands the case to a human: reaches an escalating accept state.
pub fn escalate_case_action() -> Vec<TokenId> {
    vec![TOK_ESCALATE_CASE, TOK_END_OF_ACTION]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfa::compile;
    use crate::grammar::parse_grammar;

    #[test]
    fn version_family_tightens_monotonically() {
        let vocab = clinical_vocab();
        let mut prev_allowed = usize::MAX;
        for version in 1..=5 {
            let g = parse_grammar(&dosage_grammar_source(version)).unwrap();
            assert_eq!(g.version, version);
            let dfa = compile(&g, &vocab).unwrap();
            assert!(dfa.accepts(&safe_dosage_action()));
            assert!(dfa.accepts(&escalate_case_action()));
            assert_eq!(dfa.accepts(&unsafe_dosage_action()), version == 1);
            let dose_rules = g.rules.iter().filter(|r| r.lhs == "Dose").count();
            assert!(dose_rules <= prev_allowed);
            prev_allowed = dose_rules;
        }
    }

    #[test]
    fn vocab_source_parses_back() {
        let v = Vocabulary::parse(&clinical_vocab_source()).unwrap();
        assert_eq!(v, clinical_vocab());
    }

    #[test]
    fn start_state_allows_exactly_the_action_verbs() {
        let g = parse_grammar(&dosage_grammar_source(2)).unwrap();
        let dfa = compile(&g, &clinical_vocab()).unwrap();
        let allowed = dfa.allowed(dfa.start()).unwrap();
        assert_eq!(allowed.ids, &[TOK_ADMINISTER, TOK_ESCALATE_CASE]);
    }
}
