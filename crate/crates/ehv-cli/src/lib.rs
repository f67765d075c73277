//! Command implementations behind the `ehv` binary.
//!
//! Exit code contract: 0 on success, 1 when a checked invariant or a
//! verification fails (including compile/run errors on operator input),
//! 2 on usage errors (handled by the argument parser in `main`).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};

use ehv_core::dfa::{compile_with, CompileOptions, Dfa};
use ehv_core::fixtures;
use ehv_core::gbom::{export_oscal, parse_oscal, verify_chain, ChainReport, GbomLog};
use ehv_core::grammar::parse_grammar;
use ehv_core::logits::{mask_in_place, Logits, MockLogitSource, MASKED};
use ehv_core::sim::scenario::ActionKind;
use ehv_core::sim::{audit_complete, explore, run, ModelConfig, Scenario, Workload};
use ehv_core::vocab::Vocabulary;

/// Success / invariant-failure split for `main`'s exit code.
pub struct CommandOutcome {
    pub exit_code: i32,
    pub report: String,
}

impl CommandOutcome {
    fn ok(report: String) -> CommandOutcome {
        CommandOutcome {
            exit_code: 0,
            report,
        }
    }

    fn failed(report: String) -> CommandOutcome {
        CommandOutcome {
            exit_code: 1,
            report,
        }
    }
}

// ---------------------------------------------------------------------------
// compile
// ---------------------------------------------------------------------------

pub fn cmd_compile(
    grammar_path: &Path,
    vocab_path: &Path,
    budget: usize,
) -> Result<CommandOutcome> {
    let grammar_text = fs::read_to_string(grammar_path)
        .with_context(|| format!("reading {}", grammar_path.display()))?;
    let vocab_text = fs::read_to_string(vocab_path)
        .with_context(|| format!("reading {}", vocab_path.display()))?;
    let grammar = parse_grammar(&grammar_text)?;
    let vocab = Vocabulary::parse(&vocab_text)?;
    let dfa = compile_with(
        &grammar,
        &vocab,
        &CompileOptions {
            state_budget: budget,
            source_root: None,
        },
    )?;
    let accepting = (0..dfa.state_count() as u32)
        .filter(|&q| dfa.is_accepting(q))
        .count();
    let escalating = (0..dfa.state_count() as u32)
        .filter(|&q| dfa.is_escalating(q))
        .count();
    let mut out = String::new();
    out.push_str(&format!(
        "grammar       {} v{}\n",
        grammar.name, grammar.version
    ));
    out.push_str(&format!("rules         {}\n", grammar.rules.len()));
    out.push_str(&format!("vocabulary    {} tokens\n", vocab.size()));
    out.push_str(&format!("states        {}\n", dfa.state_count()));
    out.push_str(&format!("accepting     {accepting}\n"));
    out.push_str(&format!("escalating    {escalating}\n"));
    out.push_str(&format!(
        "policy root   sha256:{}\n",
        dfa.source_root().to_hex()
    ));
    Ok(CommandOutcome::ok(out))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(
    scenario_path: Option<&Path>,
    workload: Option<&str>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CommandOutcome> {
    let scenario = match (scenario_path, workload) {
        (Some(path), _) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            Scenario::parse(&text, base)?
        }
        (None, Some(w)) => {
            let w = Workload::parse(w).ok_or_else(|| anyhow!("unknown workload {w:?}"))?;
            Scenario::workload_default(w, seed)
        }
        (None, None) => {
            return Err(anyhow!("provide a scenario file or --workload"));
        }
    };
    let output = run(&scenario)?;

    let mut report = String::new();
    report.push_str(&format!(
        "scenario {} (workload {}, seed {})\n\n",
        scenario.name,
        scenario.workload.as_str(),
        scenario.seed
    ));
    report.push_str(&output.metrics.render_table());

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("events.log"), &output.event_log)?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&output.metrics)?,
        )?;
        for (i, gbom) in output.gboms.iter().enumerate() {
            fs::write(dir.join(format!("node{i}.gbom")), gbom.to_lines())?;
            fs::write(
                dir.join(format!("node{i}.oscal.json")),
                serde_json::to_string_pretty(&export_oscal(gbom))?,
            )?;
        }
        report.push_str(&format!("\nartifacts written to {}\n", dir.display()));
    }

    let m = &output.metrics;
    let clean = m.ig_violations == 0 && m.permits_while_halted == 0 && audit_complete(&output);
    if clean {
        report.push_str("\ninvariants: ok\n");
        Ok(CommandOutcome::ok(report))
    } else {
        report.push_str(&format!(
            "\nINVARIANT FAILURE: ig_violations={} permits_while_halted={} audit_complete={}\n",
            m.ig_violations,
            m.permits_while_halted,
            audit_complete(&output)
        ));
        Ok(CommandOutcome::failed(report))
    }
}

// ---------------------------------------------------------------------------
// explore
// ---------------------------------------------------------------------------

pub fn cmd_explore(
    versions: u64,
    actions: usize,
    depth: usize,
    budget: usize,
) -> Result<CommandOutcome> {
    let all = [
        ActionKind::SafeDosage,
        ActionKind::UnsafeDosage,
        ActionKind::EscalateCase,
    ];
    if actions == 0 || actions > all.len() {
        return Err(anyhow!("--actions must be 1..=3"));
    }
    let config = ModelConfig {
        max_policy_version: versions,
        actions: all[..actions].to_vec(),
        depth_bound: depth,
        state_budget: budget,
    };
    let report = explore(&config)?;
    let text = report.render();
    if report.violations.is_empty() && report.deadlocks == 0 && report.complete {
        Ok(CommandOutcome::ok(text))
    } else {
        Ok(CommandOutcome::failed(text))
    }
}

// ---------------------------------------------------------------------------
// gbom export / verify
// ---------------------------------------------------------------------------

pub fn cmd_gbom_export(log_path: &Path, out: Option<&Path>) -> Result<CommandOutcome> {
    let text =
        fs::read_to_string(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let log = GbomLog::from_lines(&text)?;
    let doc = serde_json::to_string_pretty(&export_oscal(&log))?;
    match out {
        Some(path) => {
            fs::write(path, &doc)?;
            Ok(CommandOutcome::ok(format!(
                "exported {} records to {}\n",
                log.len(),
                path.display()
            )))
        }
        None => Ok(CommandOutcome::ok(doc)),
    }
}

pub fn cmd_gbom_verify(path: &Path) -> Result<CommandOutcome> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // An OSCAL export is one JSON document; a persisted log is one record
    // per line.
    let records = match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(doc) if doc.get("assessment-results").is_some() => parse_oscal(&doc)?,
        _ => GbomLog::from_lines(&text)?.records().to_vec(),
    };
    match verify_chain(&records) {
        ChainReport::Valid { records } => Ok(CommandOutcome::ok(format!(
            "chain valid: {records} records\n"
        ))),
        ChainReport::Broken { first_bad_index } => Ok(CommandOutcome::failed(format!(
            "chain BROKEN at record index {first_bad_index}\n"
        ))),
    }
}

// ---------------------------------------------------------------------------
// bench-mask
// ---------------------------------------------------------------------------

pub struct BenchReport {
    pub vocab_size: u32,
    pub dfa_states: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mean_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub correctness_checked: usize,
    pub correctness_failures: usize,
    pub hardware: String,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("vocabulary          {}\n", self.vocab_size));
        out.push_str(&format!("dfa states          {}\n", self.dfa_states));
        out.push_str(&format!("iterations          {}\n", self.iterations));
        out.push_str(&format!("seed                {}\n", self.seed));
        out.push_str(&format!("mean per step       {:.3} us\n", self.mean_us));
        out.push_str(&format!("p99 per step        {:.3} us\n", self.p99_us));
        out.push_str(&format!("max per step        {:.3} us\n", self.max_us));
        out.push_str(&format!(
            "correctness         {}/{} sampled re-checks passed\n",
            self.correctness_checked - self.correctness_failures,
            self.correctness_checked
        ));
        out.push_str(&format!("hardware            {}\n", self.hardware));
        out
    }
}

fn hardware_description() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{cpu} ({} {})",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Measure per-step mask application over seeded random logits, cycling
/// through the automaton's states. One percent of iterations are re-checked
/// against a direct per-token oracle so the benchmark cannot drift from the
/// enforcement semantics.
pub fn bench_mask(dfa: &Dfa, iterations: usize, seed: u64) -> BenchReport {
    let vocab_size = dfa.vocab_size();
    let mut source = MockLogitSource::new(seed, vocab_size);
    let raw: Vec<Logits> = (0..16).map(|_| source.next_logits()).collect();
    let mut buffer = Logits::new(vec![0.0; vocab_size as usize]);
    let mut samples_ns: Vec<u64> = Vec::with_capacity(iterations);
    let mut checked = 0usize;
    let mut failures = 0usize;

    for i in 0..iterations {
        let state = (i % dfa.state_count()) as u32;
        let input = &raw[i % raw.len()];
        let allowed = dfa.allowed(state).expect("state in range");

        let start = Instant::now();
        buffer.scores.copy_from_slice(&input.scores);
        mask_in_place(&mut buffer, &allowed).expect("length matches");
        samples_ns.push(start.elapsed().as_nanos() as u64);

        if i % 100 == 0 {
            checked += 1;
            for k in 0..vocab_size {
                let expect = if allowed.ids.binary_search(&k).is_ok() {
                    input.scores[k as usize]
                } else {
                    MASKED
                };
                if buffer.scores[k as usize] != expect
                    && !(buffer.scores[k as usize].is_nan() && expect.is_nan())
                {
                    failures += 1;
                    break;
                }
            }
        }
    }

    samples_ns.sort_unstable();
    let mean_us = samples_ns.iter().sum::<u64>() as f64 / samples_ns.len() as f64 / 1_000.0;
    let p99_us = samples_ns[(samples_ns.len() * 99) / 100 - 1] as f64 / 1_000.0;
    let max_us = *samples_ns.last().expect("non-empty") as f64 / 1_000.0;

    BenchReport {
        vocab_size,
        dfa_states: dfa.state_count(),
        iterations,
        seed,
        mean_us,
        p99_us,
        max_us,
        correctness_checked: checked,
        correctness_failures: failures,
        hardware: hardware_description(),
    }
}

pub fn cmd_bench_mask(
    vocab_size: u32,
    iterations: usize,
    seed: u64,
    grammar_path: Option<&Path>,
) -> Result<CommandOutcome> {
    let grammar_text = match grammar_path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => fixtures::dosage_grammar_source(2),
    };
    let grammar = parse_grammar(&grammar_text)?;
    let vocab = Vocabulary::anonymous(vocab_size);
    let dfa = compile_with(&grammar, &vocab, &CompileOptions::default())?;
    let report = bench_mask(&dfa, iterations, seed);
    let text = report.render();
    if report.correctness_failures > 0 {
        return Ok(CommandOutcome::failed(text));
    }
    Ok(CommandOutcome::ok(text))
}

// ---------------------------------------------------------------------------
// fixtures
// ---------------------------------------------------------------------------

/// Write the bundled clinical policy fixtures and example scenarios into a
/// directory, ready for `compile` and `simulate`.
pub fn cmd_fixtures(out_dir: &Path) -> Result<CommandOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut write = |name: &str, content: String| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };

    write("vincristine_v1.grammar", fixtures::dosage_grammar_source(1))?;
    write("vincristine_v2.grammar", fixtures::dosage_grammar_source(2))?;
    write("clinical.vocab", fixtures::clinical_vocab_source())?;
    write(
        "w1_baseline.scenario",
        "\
# Safe actions only: the PERMIT baseline with masked generation.
scenario w1-baseline
seed 11
nodes 3
lambda 3600
epoch-ttl-ms 60000
duration-ms 30000
workload W1
grammar vincristine_v1.grammar
vocab clinical.vocab
generate on
log-tokens on
"
        .into(),
    )?;
    write(
        "w2_unsafe.scenario",
        "\
# Unsafe dosage denied; adversarial logits pushed against the mask.
scenario w2-unsafe
seed 12
nodes 3
lambda 3600
epoch-ttl-ms 60000
duration-ms 30000
workload W2
grammar vincristine_v2.grammar
vocab clinical.vocab
generate on
log-tokens on
"
        .into(),
    )?;
    write(
        "w3_escalate.scenario",
        "\
# Ambiguous cases escalate to a human approver with signed overrides.
scenario w3-escalate
seed 13
nodes 3
lambda 3600
epoch-ttl-ms 60000
duration-ms 30000
workload W3
grammar vincristine_v1.grammar
vocab clinical.vocab
"
        .into(),
    )?;
    write(
        "w4_update.scenario",
        "\
# Mid-epoch ceiling reduction: boundary behavior and staleness accounting.
scenario w4-update
seed 14
nodes 3
lambda 500000
epoch-ttl-ms 60000
duration-ms 20000
workload W4
grammar vincristine_v1.grammar
vocab clinical.vocab
publish 5000 vincristine_v2.grammar
"
        .into(),
    )?;
    write(
        "w5_partition.scenario",
        "\
# Control-plane partition past the epoch TTL: fail-closed and recovery.
scenario w5-partition
seed 15
nodes 3
lambda 3600
epoch-ttl-ms 60000
duration-ms 180000
workload W5
grammar vincristine_v1.grammar
vocab clinical.vocab
partition node0 authority 60500 150500
partition node1 authority 60500 150500
partition node2 authority 60500 150500
"
        .into(),
    )?;
    write(
        "vincristine.scenario",
        "\
# Ceiling reduction regression: 1.5 permitted, then excluded fleet-wide.
scenario vincristine-regression
seed 21
nodes 3
lambda 7200
epoch-ttl-ms 60000
duration-ms 30000
workload W4
grammar vincristine_v1.grammar
vocab clinical.vocab
publish 8000 vincristine_v2.grammar
generate on
log-tokens on
"
        .into(),
    )?;

    let list = written
        .iter()
        .map(|p| format!("  {}\n", p.display()))
        .collect::<String>();
    Ok(CommandOutcome::ok(format!("wrote fixtures:\n{list}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_on_one_token_vocabulary_is_a_sanity_floor() {
        let grammar =
            parse_grammar("token \"go\" = 0\nrule S -> \"go\" S\nrule S -> \"go\"\n").unwrap();
        let dfa = compile_with(
            &grammar,
            &Vocabulary::anonymous(1),
            &CompileOptions::default(),
        )
        .unwrap();
        let report = bench_mask(&dfa, 200, 1);
        assert_eq!(report.correctness_failures, 0);
        assert!(report.mean_us < 1_000.0, "near-zero work exceeded 1ms");
    }

    #[test]
    fn bench_rechecks_every_hundredth_iteration() {
        let grammar = parse_grammar(&fixtures::dosage_grammar_source(2)).unwrap();
        let dfa = compile_with(
            &grammar,
            &Vocabulary::anonymous(64),
            &CompileOptions::default(),
        )
        .unwrap();
        let report = bench_mask(&dfa, 1_000, 3);
        assert_eq!(report.correctness_checked, 10);
        assert_eq!(report.correctness_failures, 0);
    }
}
