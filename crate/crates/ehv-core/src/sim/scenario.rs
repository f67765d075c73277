//! Scenario definitions and the scenario file parser.
//!
//! Scenario files are line-oriented, `#` comments, one directive per line:
//!
//! ```text
//! scenario w5-failclosed
//! seed 42
//! nodes 3
//! instances 5000
//! recommendations-per-hour 100
//! lambda 3600                      # actions/hour, aggregate
//! epoch-ttl-ms 60000
//! duration-ms 180000
//! workload W5
//! delay-ms 5 50                    # uniform link delay range
//! gossip-ms 500
//! attest-latency-ms 200
//! grammar vincristine_v1.grammar   # genesis policy, path relative to file
//! vocab clinical.vocab
//! publish 30000 vincristine_v2.grammar
//! partition node0 authority 60500 150500
//! reset 40000 node0 authorized
//! generate on
//! log-tokens on
//! ```

use std::path::Path;

use thiserror::Error;

use crate::fixtures;
use crate::vocab::{TokenId, Vocabulary};

/// Benchmark workload profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Safe action permitted: the PERMIT baseline.
    W1,
    /// Unsafe dosage denied with adversarial logits against the mask.
    W2,
    /// Ambiguous case escalated to a human, with signed override.
    W3,
    /// Mid-epoch policy update: boundary behavior and staleness.
    W4,
    /// Network partition past the epoch: fail-closed transition.
    W5,
    /// Cycles safe/unsafe/escalate.
    Mixed,
}

impl Workload {
    pub fn parse(s: &str) -> Option<Workload> {
        match s {
            "W1" => Some(Workload::W1),
            "W2" => Some(Workload::W2),
            "W3" => Some(Workload::W3),
            "W4" => Some(Workload::W4),
            "W5" => Some(Workload::W5),
            "mixed" | "Mixed" => Some(Workload::Mixed),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Workload::W1 => "W1",
            Workload::W2 => "W2",
            Workload::W3 => "W3",
            Workload::W4 => "W4",
            Workload::W5 => "W5",
            Workload::Mixed => "mixed",
        }
    }
}

/// The candidate actions a workload submits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    SafeDosage,
    UnsafeDosage,
    EscalateCase,
}

impl ActionKind {
    pub fn tokens(self) -> Vec<TokenId> {
        match self {
            ActionKind::SafeDosage => fixtures::safe_dosage_action(),
            ActionKind::UnsafeDosage => fixtures::unsafe_dosage_action(),
            ActionKind::EscalateCase => fixtures::escalate_case_action(),
        }
    }

    pub fn class(self) -> &'static str {
        match self {
            ActionKind::SafeDosage | ActionKind::UnsafeDosage => "dosage",
            ActionKind::EscalateCase => "escalation",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::SafeDosage => "safe_dosage",
            ActionKind::UnsafeDosage => "unsafe_dosage",
            ActionKind::EscalateCase => "escalate_case",
        }
    }
}

/// One endpoint of a simulated link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Node(usize),
    /// Attestation authority and policy administration, co-located.
    ControlPlane,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionInterval {
    pub a: Endpoint,
    pub b: Endpoint,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PolicyPublication {
    pub at_ms: u64,
    pub grammar_source: String,
}

#[derive(Debug, Clone)]
pub struct ResetRequest {
    pub at_ms: u64,
    pub node: usize,
    pub authorized: bool,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub nodes: usize,
    /// Fleet size I, for the legacy comparator.
    pub instances: u64,
    /// Recommendations/hour R per instance, for the legacy comparator.
    pub recs_per_hour: u64,
    /// Aggregate action arrival rate, actions/hour.
    pub lambda_per_hour: u64,
    pub epoch_ttl_ms: u64,
    pub duration_ms: u64,
    pub workload: Workload,
    pub delay_ms: (u64, u64),
    pub gossip_ms: u64,
    pub attest_latency_ms: u64,
    pub partitions: Vec<PartitionInterval>,
    pub publications: Vec<PolicyPublication>,
    pub resets: Vec<ResetRequest>,
    pub initial_grammar: String,
    pub vocab: Vocabulary,
    /// Run a masked generation pass per action in addition to the decision.
    pub generate: bool,
    /// Emit a GBOM record per generated token.
    pub log_tokens: bool,
    pub legacy_gl_days: u64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Scenario {
    /// A baseline scenario for `workload` with the clinical fixtures.
    pub fn workload_default(workload: Workload, seed: u64) -> Scenario {
        let mut s = Scenario {
            name: format!("{}-default", workload.as_str()),
            seed,
            nodes: 3,
            instances: 5_000,
            recs_per_hour: 100,
            lambda_per_hour: 3_600,
            epoch_ttl_ms: 60_000,
            duration_ms: 30_000,
            workload,
            delay_ms: (5, 50),
            gossip_ms: 500,
            attest_latency_ms: 200,
            partitions: Vec::new(),
            publications: Vec::new(),
            resets: Vec::new(),
            initial_grammar: fixtures::dosage_grammar_source(1),
            vocab: fixtures::clinical_vocab(),
            generate: false,
            log_tokens: false,
            legacy_gl_days: 14,
        };
        match workload {
            Workload::W1 => {
                s.generate = true;
                s.log_tokens = true;
            }
            Workload::W2 => {
                // Restrictive policy from genesis; adversarial generation.
                s.initial_grammar = fixtures::dosage_grammar_source(2);
                s.generate = true;
                s.log_tokens = true;
            }
            Workload::W3 => {}
            Workload::W4 => {
                s.publications.push(PolicyPublication {
                    at_ms: 5_000,
                    grammar_source: fixtures::dosage_grammar_source(2),
                });
                s.duration_ms = 20_000;
            }
            Workload::W5 => {
                s.duration_ms = 180_000;
                // Cut the control plane just after the first epoch refresh
                // (attest at 0, refresh completes at ttl), for 90 s.
                for node in 0..s.nodes {
                    s.partitions.push(PartitionInterval {
                        a: Endpoint::Node(node),
                        b: Endpoint::ControlPlane,
                        start_ms: 60_500,
                        end_ms: 150_500,
                    });
                }
            }
            Workload::Mixed => {
                s.generate = true;
            }
        }
        s
    }

    /// The candidate action for the `i`-th request under this workload.
    pub fn action_for(&self, i: u64) -> ActionKind {
        match self.workload {
            Workload::W1 | Workload::W5 => ActionKind::SafeDosage,
            Workload::W2 | Workload::W4 => ActionKind::UnsafeDosage,
            Workload::W3 => ActionKind::EscalateCase,
            Workload::Mixed => match i % 3 {
                0 => ActionKind::SafeDosage,
                1 => ActionKind::UnsafeDosage,
                _ => ActionKind::EscalateCase,
            },
        }
    }

    /// Reject impossible scenarios before any event executes.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.nodes == 0 {
            return Err(ScenarioError::Invalid("at least one node".into()));
        }
        if self.duration_ms == 0 {
            return Err(ScenarioError::Invalid("zero duration".into()));
        }
        if self.epoch_ttl_ms == 0 {
            return Err(ScenarioError::Invalid("zero epoch ttl".into()));
        }
        if self.delay_ms.0 > self.delay_ms.1 {
            return Err(ScenarioError::Invalid(format!(
                "delay range {:?} inverted",
                self.delay_ms
            )));
        }
        if self.gossip_ms == 0 {
            return Err(ScenarioError::Invalid("zero gossip interval".into()));
        }
        for p in &self.partitions {
            if p.start_ms >= p.end_ms || p.end_ms > self.duration_ms {
                return Err(ScenarioError::Invalid(format!(
                    "partition [{}, {}) outside run of {} ms",
                    p.start_ms, p.end_ms, self.duration_ms
                )));
            }
            for e in [p.a, p.b] {
                if let Endpoint::Node(n) = e {
                    if n >= self.nodes {
                        return Err(ScenarioError::Invalid(format!(
                            "partition names node{n} but there are {} nodes",
                            self.nodes
                        )));
                    }
                }
            }
        }
        for pub_ in &self.publications {
            if pub_.at_ms > self.duration_ms {
                return Err(ScenarioError::Invalid(format!(
                    "publication at {} ms outside run",
                    pub_.at_ms
                )));
            }
        }
        for r in &self.resets {
            if r.node >= self.nodes {
                return Err(ScenarioError::Invalid(format!(
                    "reset names node{} but there are {} nodes",
                    r.node, self.nodes
                )));
            }
        }
        crate::grammar::parse_grammar(&self.initial_grammar)
            .map_err(|e| ScenarioError::Invalid(format!("genesis grammar: {e}")))?;
        Ok(())
    }

    /// Parse a scenario file; relative grammar/vocab paths resolve against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::workload_default(Workload::W1, 0);
        s.name = "unnamed".into();
        s.generate = false;
        s.log_tokens = false;

        let read_file = |raw: &str, line: usize| -> Result<String, ScenarioError> {
            let path = base.join(raw);
            std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                path: format!("{} (line {line})", path.display()),
                source,
            })
        };
        let parse_endpoint = |tok: &str, line: usize| -> Result<Endpoint, ScenarioError> {
            if tok == "authority" {
                return Ok(Endpoint::ControlPlane);
            }
            tok.strip_prefix("node")
                .and_then(|n| n.parse::<usize>().ok())
                .map(Endpoint::Node)
                .ok_or_else(|| ScenarioError::Parse {
                    line,
                    message: format!("bad endpoint {tok:?} (nodeN or authority)"),
                })
        };

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let mut parts = stripped.split_whitespace();
            let directive = parts.next().expect("non-empty");
            let args: Vec<&str> = parts.collect();
            let err = |message: String| ScenarioError::Parse { line, message };
            let one = || -> Result<&str, ScenarioError> {
                if args.len() == 1 {
                    Ok(args[0])
                } else {
                    Err(err(format!("{directive} expects one argument")))
                }
            };
            let num = |v: &str| -> Result<u64, ScenarioError> {
                v.parse().map_err(|e| err(format!("bad number {v:?}: {e}")))
            };

            match directive {
                "scenario" => s.name = one()?.to_string(),
                "seed" => s.seed = num(one()?)?,
                "nodes" => s.nodes = num(one()?)? as usize,
                "instances" => s.instances = num(one()?)?,
                "recommendations-per-hour" => s.recs_per_hour = num(one()?)?,
                "lambda" => s.lambda_per_hour = num(one()?)?,
                "epoch-ttl-ms" => s.epoch_ttl_ms = num(one()?)?,
                "duration-ms" => s.duration_ms = num(one()?)?,
                "legacy-gl-days" => s.legacy_gl_days = num(one()?)?,
                "gossip-ms" => s.gossip_ms = num(one()?)?,
                "attest-latency-ms" => s.attest_latency_ms = num(one()?)?,
                "workload" => {
                    s.workload = Workload::parse(one()?)
                        .ok_or_else(|| err(format!("unknown workload {args:?}")))?;
                }
                "delay-ms" => {
                    if args.len() != 2 {
                        return Err(err("delay-ms expects min and max".into()));
                    }
                    s.delay_ms = (num(args[0])?, num(args[1])?);
                }
                "grammar" => s.initial_grammar = read_file(one()?, line)?,
                "vocab" => {
                    let text = read_file(one()?, line)?;
                    s.vocab = Vocabulary::parse(&text).map_err(|e| err(format!("vocab: {e}")))?;
                }
                "publish" => {
                    if args.len() != 2 {
                        return Err(err("publish expects <t-ms> <grammar-file>".into()));
                    }
                    s.publications.push(PolicyPublication {
                        at_ms: num(args[0])?,
                        grammar_source: read_file(args[1], line)?,
                    });
                }
                "partition" => {
                    if args.len() != 4 {
                        return Err(err("partition expects <a> <b> <start> <end>".into()));
                    }
                    s.partitions.push(PartitionInterval {
                        a: parse_endpoint(args[0], line)?,
                        b: parse_endpoint(args[1], line)?,
                        start_ms: num(args[2])?,
                        end_ms: num(args[3])?,
                    });
                }
                "reset" => {
                    if args.len() != 3 {
                        return Err(err("reset expects <t-ms> <node> authorized|unsigned".into()));
                    }
                    let node = match parse_endpoint(args[1], line)? {
                        Endpoint::Node(n) => n,
                        Endpoint::ControlPlane => {
                            return Err(err("reset target must be a node".into()))
                        }
                    };
                    s.resets.push(ResetRequest {
                        at_ms: num(args[0])?,
                        node,
                        authorized: match args[2] {
                            "authorized" => true,
                            "unsigned" => false,
                            other => {
                                return Err(err(format!(
                                    "bad reset mode {other:?} (authorized|unsigned)"
                                )))
                            }
                        },
                    });
                }
                "generate" => s.generate = flag(one()?, line)?,
                "log-tokens" => s.log_tokens = flag(one()?, line)?,
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        s.publications.sort_by_key(|p| p.at_ms);
        s.validate()?;
        Ok(s)
    }
}

fn flag(v: &str, line: usize) -> Result<bool, ScenarioError> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(ScenarioError::Parse {
            line,
            message: format!("bad flag {other:?} (on|off)"),
        }),
    }
}
