//! Task-list builders for the standard evaluation grids.
//!
//! Task ids follow `label:mode:s<seed>` with a trailing `:<domain>` for runs
//! that split one logical task (msst per target, ssmt per source). The
//! report groups columns by `label`.

use super::{Mode, TaskSpec};

/// Sources and targets of one logical transfer task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainPair {
    pub label: String,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

impl DomainPair {
    pub fn new(label: impl Into<String>, sources: &[String], targets: &[String]) -> Self {
        DomainPair {
            label: label.into(),
            sources: sources.to_vec(),
            targets: targets.to_vec(),
        }
    }
}

/// Two-source two-target tasks over four domains, as index quadruples
/// `(s1, s2, t1, t2)`.
pub const TWO_TO_TWO: [(usize, usize, usize, usize); 6] = [
    (0, 1, 2, 3),
    (2, 0, 1, 3),
    (3, 0, 2, 1),
    (1, 2, 0, 3),
    (3, 1, 0, 2),
    (3, 2, 1, 0),
];

/// The six two-source two-target tasks over `domains` (which must hold
/// four ids).
pub fn two_to_two_pairs(domains: &[String]) -> Vec<DomainPair> {
    assert_eq!(domains.len(), 4, "the two-to-two grid needs four domains");
    TWO_TO_TWO
        .iter()
        .enumerate()
        .map(|(k, &(s1, s2, t1, t2))| {
            DomainPair::new(
                format!("T{}", k + 1),
                &[domains[s1].clone(), domains[s2].clone()],
                &[domains[t1].clone(), domains[t2].clone()],
            )
        })
        .collect()
}

fn spec(id: String, sources: Vec<String>, targets: Vec<String>, mode: Mode, seed: u64, label: &str) -> TaskSpec {
    TaskSpec {
        id,
        sources,
        targets,
        mode,
        seed,
        group: Some(label.to_string()),
    }
}

/// Expands one logical task into the runs `mode` needs: one run for joint
/// modes, one per target for msst, one per source for ssmt.
pub fn tasks_for_mode(pair: &DomainPair, mode: Mode, seed: u64) -> Vec<TaskSpec> {
    let base = format!("{}:{}:s{}", pair.label, mode, seed);
    match mode {
        Mode::Msst => pair
            .targets
            .iter()
            .map(|t| {
                spec(
                    format!("{base}:{t}"),
                    pair.sources.clone(),
                    vec![t.clone()],
                    mode,
                    seed,
                    &pair.label,
                )
            })
            .collect(),
        Mode::Ssmt => pair
            .sources
            .iter()
            .map(|s| {
                spec(
                    format!("{base}:{s}"),
                    vec![s.clone()],
                    pair.targets.clone(),
                    mode,
                    seed,
                    &pair.label,
                )
            })
            .collect(),
        _ => vec![spec(
            base,
            pair.sources.clone(),
            pair.targets.clone(),
            mode,
            seed,
            &pair.label,
        )],
    }
}

fn combinations(items: &[String], k: usize) -> Vec<Vec<String>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, items[i].clone());
            out.push(rest);
        }
    }
    out
}

/// For every target domain, every choice of `k` sources among the remaining
/// domains, each trained as a `k`-to-one task. Labels read `<k>to1_<target>`.
pub fn source_count_sweep(domains: &[String], k: usize) -> Vec<DomainPair> {
    let mut out = Vec::new();
    for t in domains {
        let rest: Vec<String> = domains.iter().filter(|d| *d != t).cloned().collect();
        for srcs in combinations(&rest, k) {
            out.push(DomainPair::new(
                format!("{k}to1_{t}_{}", srcs.join("+")),
                &srcs,
                std::slice::from_ref(t),
            ));
        }
    }
    out
}

/// For every source domain, every choice of `k` targets among the remaining
/// domains. Labels read `1to<k>_<source>`.
pub fn target_count_sweep(domains: &[String], k: usize) -> Vec<DomainPair> {
    let mut out = Vec::new();
    for s in domains {
        let rest: Vec<String> = domains.iter().filter(|d| *d != s).cloned().collect();
        for tgts in combinations(&rest, k) {
            out.push(DomainPair::new(
                format!("1to{k}_{s}_{}", tgts.join("+")),
                std::slice::from_ref(s),
                &tgts,
            ));
        }
    }
    out
}
