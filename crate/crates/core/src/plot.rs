//! CSV tables and SVG line charts from the eval records of a run log.
//!
//! Output is a pure function of the log, so plotting the same run twice gives
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::env::{ACTION_NAMES, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::records::LogRecord;

pub const REWARD_CSV: &str = "reward.csv";
pub const PS_CSV: &str = "ps.csv";
pub const Q_CSV: &str = "q.csv";
pub const REWARD_SVG: &str = "reward.svg";
pub const PS_SVG: &str = "ps.svg";

const PALETTE: [&str; NUM_ACTIONS] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub segment: u64,
    pub avg_reward: f64,
    pub swarm_clears: u64,
    pub q: Vec<f64>,
    pub ps: Vec<f64>,
}

/// Eval records in log order.
pub fn segment_rows(records: &[LogRecord]) -> Result<Vec<SegmentRow>> {
    let mut rows = Vec::new();
    for r in records {
        if let LogRecord::Eval { segment, avg_reward, swarm_clears, q, ps } = r {
            if q.len() != NUM_ACTIONS || ps.len() != NUM_ACTIONS {
                return Err(Error::State(format!(
                    "eval record for segment {segment} has {} q and {} ps values, expected {NUM_ACTIONS}",
                    q.len(),
                    ps.len()
                )));
            }
            rows.push(SegmentRow {
                segment: *segment,
                avg_reward: *avg_reward,
                swarm_clears: *swarm_clears,
                q: q.clone(),
                ps: ps.clone(),
            });
        }
    }
    Ok(rows)
}

fn column_name(action: usize) -> String {
    ACTION_NAMES[action].replace(' ', "_")
}

pub fn reward_csv(rows: &[SegmentRow]) -> String {
    let mut out = String::from("segment,avg_reward,swarm_clears\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.segment, r.avg_reward, r.swarm_clears);
    }
    out
}

fn per_action_csv(rows: &[SegmentRow], pick: impl Fn(&SegmentRow) -> &[f64]) -> String {
    let mut out = String::from("segment");
    for a in 0..NUM_ACTIONS {
        out.push(',');
        out.push_str(&column_name(a));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}", r.segment);
        for v in pick(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Segment plus one probability column per action.
pub fn ps_csv(rows: &[SegmentRow]) -> String {
    per_action_csv(rows, |r| &r.ps)
}

/// Probe Q-values in the same layout as [`ps_csv`].
pub fn q_csv(rows: &[SegmentRow]) -> String {
    per_action_csv(rows, |r| &r.q)
}

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub values: Vec<f64>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart over shared x values. `y_range` of `None` fits the data.
pub fn line_chart_svg(title: &str, x_label: &str, x: &[f64], series: &[Series<'_>], y_range: Option<(f64, f64)>) -> String {
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (y0, mut y1) = y_range.unwrap_or_else(|| {
        let lo = finite().fold(f64::INFINITY, f64::min);
        let hi = finite().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() { (lo.min(0.0), hi) } else { (0.0, 1.0) }
    });
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (x0, mut x1) = match (x.first(), x.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0.0, 1.0),
    };
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + (v - x0) / (x1 - x0) * plot_w;
    let py = |v: f64| TOP + (1.0 - (v - y0) / (y1 - y0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{}</text>"#, LEFT, escape(title));
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2}" stroke="black" fill="none"/>"#,
        LEFT,
        TOP,
        LEFT,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    );
    for (v, anchor_y) in [(y0, TOP + plot_h), (y1, TOP)] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, anchor_y + 4.0, tick(v));
    }
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{}</text>"#, px(v), TOP + plot_h + 16.0, tick(v));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );

    for (i, ser) in series.iter().enumerate() {
        let mut d = String::new();
        let mut pen_down = false;
        for (&xv, &yv) in x.iter().zip(&ser.values) {
            if !yv.is_finite() {
                pen_down = false;
                continue;
            }
            let cmd = if pen_down { 'L' } else { 'M' };
            let _ = write!(d, "{}{:.2} {:.2} ", cmd, px(xv), py(yv.clamp(y0, y1)));
            pen_down = true;
        }
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" stroke="{}" stroke-width="1.5" fill="none"/>"#, d.trim_end(), ser.color);
        }
        let ly = TOP + 14.0 * i as f64 + 6.0;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(s, r#"<path d="M{:.2} {:.2} L{:.2} {:.2}" stroke="{}" stroke-width="2"/>"#, lx, ly, lx + 16.0, ly, ser.color);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 22.0, ly + 4.0, escape(ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

#[derive(Debug, Clone)]
pub struct PlotOutputs {
    pub reward_csv: PathBuf,
    pub ps_csv: PathBuf,
    pub q_csv: PathBuf,
    pub reward_svg: PathBuf,
    pub ps_svg: PathBuf,
}

/// Write all tables and charts for `records` into `out_dir`.
pub fn write_plots(records: &[LogRecord], out_dir: &Path) -> Result<PlotOutputs> {
    let rows = segment_rows(records)?;
    if rows.is_empty() {
        return Err(Error::Argument("log has no eval records to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    let x: Vec<f64> = rows.iter().map(|r| r.segment as f64).collect();
    let reward = [Series { label: "avg reward", color: PALETTE[0], values: rows.iter().map(|r| r.avg_reward).collect() }];
    let names: Vec<&str> = ACTION_NAMES.to_vec();
    let ps: Vec<Series<'_>> = (0..NUM_ACTIONS)
        .map(|a| Series { label: names[a], color: PALETTE[a], values: rows.iter().map(|r| r.ps[a]).collect() })
        .collect();

    let out = PlotOutputs {
        reward_csv: out_dir.join(REWARD_CSV),
        ps_csv: out_dir.join(PS_CSV),
        q_csv: out_dir.join(Q_CSV),
        reward_svg: out_dir.join(REWARD_SVG),
        ps_svg: out_dir.join(PS_SVG),
    };
    fs::write(&out.reward_csv, reward_csv(&rows))?;
    fs::write(&out.ps_csv, ps_csv(&rows))?;
    fs::write(&out.q_csv, q_csv(&rows))?;
    fs::write(&out.reward_svg, line_chart_svg("Average reward per step", "segment", &x, &reward, None))?;
    fs::write(&out.ps_svg, line_chart_svg("Probability of success at the probe state", "segment", &x, &ps, Some((0.0, 1.0))))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(segment: u64, base: f64) -> LogRecord {
        LogRecord::Eval {
            segment,
            avg_reward: base,
            swarm_clears: segment,
            q: (0..6).map(|a| base + a as f64).collect(),
            ps: (0..6).map(|a| a as f64 / 10.0).collect(),
        }
    }

    #[test]
    fn csv_layout() {
        let recs = vec![
            LogRecord::Step { step: 0, action: 1, reward: 0.0, reset: false },
            eval(1, 0.25),
            eval(2, 0.5),
        ];
        let rows = segment_rows(&recs).unwrap();
        let ps = ps_csv(&rows);
        let lines: Vec<&str> = ps.lines().collect();
        assert_eq!(lines[0], "segment,do_nothing,fire,move_right,move_left,move_right_and_fire,move_left_and_fire");
        assert_eq!(lines[1], "1,0,0.1,0.2,0.3,0.4,0.5");
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 7));
        assert_eq!(reward_csv(&rows).lines().nth(2).unwrap(), "2,0.5,2");
    }

    #[test]
    fn csv_values_round_trip() {
        let recs = vec![LogRecord::Eval {
            segment: 1,
            avg_reward: 1.0 / 3.0,
            swarm_clears: 0,
            q: vec![0.1 + 0.2; 6],
            ps: vec![std::f64::consts::FRAC_1_PI; 6],
        }];
        let rows = segment_rows(&recs).unwrap();
        let line = ps_csv(&rows).lines().nth(1).unwrap().to_string();
        let back: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(back, vec![std::f64::consts::FRAC_1_PI; 6]);
    }

    #[test]
    fn wrong_width_rejected() {
        let recs = vec![LogRecord::Eval { segment: 1, avg_reward: 0.0, swarm_clears: 0, q: vec![], ps: vec![] }];
        assert!(matches!(segment_rows(&recs), Err(Error::State(_))));
    }

    #[test]
    fn no_evals_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![LogRecord::Step { step: 0, action: 0, reward: 0.0, reset: false }];
        assert!(write_plots(&recs, dir.path()).is_err());
    }

    #[test]
    fn deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let recs: Vec<LogRecord> = (1..=5).map(|s| eval(s, s as f64 * 0.1)).collect();
        let oa = write_plots(&recs, a.path()).unwrap();
        let ob = write_plots(&recs, b.path()).unwrap();
        for (x, y) in [(&oa.ps_svg, &ob.ps_svg), (&oa.reward_svg, &ob.reward_svg), (&oa.ps_csv, &ob.ps_csv)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let svg = fs::read_to_string(&oa.ps_svg).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 6);
    }

    #[test]
    fn single_point_and_nan_do_not_break_chart() {
        let svg = line_chart_svg("t", "x", &[1.0], &[Series { label: "a", color: "red", values: vec![f64::NAN] }], None);
        assert!(!svg.contains("NaN"));
        let svg = line_chart_svg("t", "x", &[1.0], &[Series { label: "a", color: "red", values: vec![2.0] }], None);
        assert!(svg.contains("M"));
    }
}
