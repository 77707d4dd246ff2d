//! Line-oriented attack records and per-iteration trace files.
//!
//! Records are tab-separated with a header line. Floats use Rust's shortest
//! round-trip formatting, so parsing a record gives back the exact value.

use std::fmt::Write as _;
use std::path::Path;

use asma_core::{AttackReport, TraceEntry, Variant};

use crate::error::{Error, Result};

pub const RECORD_HEADER: &str =
    "source\ttarget\tvariant\talpha\tbeta\ttau\titers\tl2\tlinf\tiou\tpa\tconverged\tactive_initial\tactive_final";
pub const TRACE_HEADER: &str = "iteration\talpha\tactive_pixels\tiou\tl2";

/// Outcome of one attack in the form written to the records file.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRecord {
    pub source: u32,
    pub target: u32,
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub iters: usize,
    pub l2: f64,
    pub linf: f64,
    pub iou: f64,
    pub pa: f64,
    pub converged: bool,
    /// Pixels predicted differently from the target before the attack.
    pub active_initial: usize,
    /// The same count for the last iterate.
    pub active_final: usize,
}

impl AttackRecord {
    pub fn from_report(report: &AttackReport, target: u32) -> Self {
        let c = &report.config;
        Self {
            source: report.source_id,
            target,
            variant: c.variant,
            alpha: c.alpha,
            beta: c.beta,
            tau: c.tau,
            iters: report.iterations(),
            l2: report.distance.l2,
            linf: report.distance.linf,
            iou: report.accuracy.iou,
            pa: report.accuracy.pa,
            converged: report.converged,
            active_initial: report.initial_active,
            active_final: report.final_active,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{}",
            self.source,
            self.target,
            self.variant,
            self.alpha,
            self.beta,
            self.tau,
            self.iters,
            self.l2,
            self.linf,
            self.iou,
            self.pa,
            self.converged as u8,
            self.active_initial,
            self.active_final
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Config(format!("bad attack record ({what}): {line}"));
        if f.len() != 14 {
            return Err(bad("field count"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(RECORD_HEADER.split('\t').nth(i).unwrap()));
        Ok(Self {
            source: f[0].parse().map_err(|_| bad("source"))?,
            target: f[1].parse().map_err(|_| bad("target"))?,
            variant: f[2].parse().map_err(|_| bad("variant"))?,
            alpha: num(3)?,
            beta: num(4)?,
            tau: num(5)?,
            iters: f[6].parse().map_err(|_| bad("iters"))?,
            l2: num(7)?,
            linf: num(8)?,
            iou: num(9)?,
            pa: num(10)?,
            converged: match f[11] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("converged")),
            },
            active_initial: f[12].parse().map_err(|_| bad("active_initial"))?,
            active_final: f[13].parse().map_err(|_| bad("active_final"))?,
        })
    }
}

pub fn format_records(records: &[AttackRecord]) -> String {
    let mut out = String::from(RECORD_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<AttackRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RECORD_HEADER) {
        return Err(Error::Config("attack records: missing header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(AttackRecord::parse_line).collect()
}

pub fn format_trace(trace: &[TraceEntry]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for t in trace {
        writeln!(out, "{}\t{:?}\t{}\t{:?}\t{:?}", t.iteration, t.alpha, t.active_pixels, t.iou, t.l2).unwrap();
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_round_trips_exactly() {
        let r = AttackRecord {
            source: 3,
            target: 17,
            variant: Variant::Asma,
            alpha: 0.0,
            beta: 1e-3,
            tau: 1e-7 * 100.0,
            iters: 82,
            l2: 3.9176544189453125,
            linf: 0.1 + 0.2,
            iou: 0.9912280701754386,
            pa: 0.999755859375,
            converged: true,
            active_initial: 812,
            active_final: 4,
        };
        let line = r.to_line();
        assert!(line.starts_with("3\t17\tASMA\t"));
        assert_eq!(AttackRecord::parse_line(&line).unwrap(), r);
        let text = format_records(&[r.clone(), r.clone()]);
        assert_eq!(parse_records(&text).unwrap(), vec![r.clone(), r]);
    }

    #[test]
    fn malformed_records_are_rejected() {
        assert!(AttackRecord::parse_line("1\t2\tASM").is_err());
        assert!(parse_records("nonsense\n").is_err());
        let mut fields: Vec<String> = RECORD_HEADER.split('\t').map(|_| "0".to_string()).collect();
        fields[2] = "SSM".into();
        fields[11] = "2".into();
        assert!(AttackRecord::parse_line(&fields[..12].join("\t")).is_err());
        assert!(AttackRecord::parse_line(&fields.join("\t")).is_err());
    }
}
