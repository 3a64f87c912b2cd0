//! Trajectories as JSON lines, one state per line.

use std::fmt::Write as _;

use serde::Serialize;
use vdm_core::sampler::{Level, Trajectory};

#[derive(Serialize)]
struct Line<'a> {
    chain: usize,
    step: usize,
    level: Level,
    x: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    score_norm: Option<f64>,
}

pub fn trajectories_to_jsonl(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for (chain, tr) in trajectories.iter().enumerate() {
        for s in &tr.states {
            let line = Line {
                chain,
                step: s.step,
                level: s.level,
                x: &s.x,
                score_norm: s.score_norm,
            };
            let json = serde_json::to_string(&line).expect("plain data serializes");
            writeln!(out, "{json}").expect("string write");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use vdm_core::sampler::{langevin, FnField, LangevinConfig};

    #[test]
    fn one_line_per_state() {
        let f = FnField::new(2, |x: &[f64], _| x.iter().map(|v| -v).collect());
        let tr = langevin(&f, Level::Sigma(1.0), &[1.0, 0.0], &LangevinConfig::new(0.1, 4, false), None, &mut vdm_core::rng::seeded(0)).unwrap();
        let text = trajectories_to_jsonl(&[tr.clone(), tr]);
        assert_eq!(text.lines().count(), 10);
        let v: serde_json::Value = serde_json::from_str(text.lines().nth(5).unwrap()).unwrap();
        assert_eq!(v["chain"], 1);
        assert_eq!(v["step"], 0);
        assert_eq!(v["level"]["sigma"], 1.0);
    }
}
