use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{ExactnessReport, ReportRow, SweepCurve, Table1Report, TimeBase};

pub const CSV_COLUMNS: [&str; 16] = [
    "mode",
    "gamma",
    "alpha_target",
    "alpha_measured",
    "ntt_ms",
    "up_mbps",
    "down_mbps",
    "uplink_bytes_per_round",
    "downlink_bytes_per_round",
    "t_comm_ms_measured",
    "t_comm_ms_predicted",
    "tokens_per_round",
    "throughput_tps",
    "speedup_measured",
    "speedup_predicted",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Markdown,
}

fn fields(r: &ReportRow) -> [String; 16] {
    [
        r.mode.label().to_string(),
        r.gamma.to_string(),
        r.alpha_target.to_string(),
        r.alpha_measured.map_or_else(String::new, |a| format!("{a:.6}")),
        r.ntt_ms.to_string(),
        r.up_mbps.to_string(),
        r.down_mbps.to_string(),
        format!("{:.3}", r.uplink_bytes_per_round),
        format!("{:.3}", r.downlink_bytes_per_round),
        format!("{:.6}", r.t_comm_ms_measured),
        format!("{:.6}", r.t_comm_ms_predicted),
        format!("{:.6}", r.tokens_per_round),
        format!("{:.6}", r.throughput_tps),
        format!("{:.6}", r.speedup_measured),
        format!("{:.6}", r.speedup_predicted),
        r.seed.to_string(),
    ]
}

fn csv_table<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn md_table<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(N));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

/// Session rows in the stable column order, one header row.
pub fn render(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => csv_table(CSV_COLUMNS, rows.iter().map(fields)),
        ReportFormat::Markdown => {
            let mut out = md_table(CSV_COLUMNS, rows.iter().map(fields));
            if rows.iter().any(|r| r.time_base == TimeBase::Wall) {
                out.push_str("\nTimes are wall-clock measurements.\n");
            }
            Ok(out)
        }
    }
}

pub fn render_table1(report: &Table1Report, format: ReportFormat) -> Result<String> {
    let header = ["gamma", "alpha", "reject_prob", "t_comm_ms", "expected_reject_prob", "expected_t_comm_ms"];
    let rows = report.cells.iter().map(|(c, prob, ms)| {
        [
            c.gamma.to_string(),
            c.alpha.to_string(),
            format!("{:.2}", c.reject_prob_rounded()),
            format!("{:.2}", c.t_comm_rounded()),
            format!("{prob:.2}"),
            format!("{ms:.2}"),
        ]
    });
    match format {
        ReportFormat::Csv => csv_table(header, rows),
        ReportFormat::Markdown => Ok(format!(
            "Fitted NTT {:.2} ms, distribution transfer {:.2} ms\n\n{}",
            report.ntt_ms,
            report.payload_ms,
            md_table(header, rows)
        )),
    }
}

pub fn render_sweep(curves: &[SweepCurve], format: ReportFormat) -> Result<String> {
    let rows: Vec<ReportRow> = curves.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let mut out = render(&rows, format)?;
    if format == ReportFormat::Markdown {
        out.push('\n');
        for c in curves {
            let r = &c.rows[0];
            let _ = writeln!(
                out,
                "- {} α={} NTT={} ms {}/{} Mbps seed {}: best γ measured {}, predicted {}{}",
                r.mode.label(),
                r.alpha_target,
                r.ntt_ms,
                r.up_mbps,
                r.down_mbps,
                r.seed,
                c.argmax_measured,
                c.argmax_predicted,
                if c.interior() { " (interior)" } else { "" }
            );
        }
    }
    Ok(out)
}

pub fn render_exactness(report: &ExactnessReport) -> String {
    let mut out = format!(
        "vocab {}: {} analytic trials, max |law - P| = {:.3e}\n",
        report.vocab_size, report.trials, report.max_abs_dev
    );
    for g in &report.chi_squared {
        let _ = writeln!(
            out,
            "chi-squared {:.3} on {} dof, p = {:.4}",
            g.statistic, g.dof, g.p_value
        );
    }
    let _ = writeln!(out, "{}", if report.passed() { "PASS" } else { "FAIL" });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::SessionMode;

    fn row() -> ReportRow {
        ReportRow {
            mode: SessionMode::Dssd,
            gamma: 8,
            alpha_target: 0.61,
            alpha_measured: Some(0.6),
            ntt_ms: 20.0,
            up_mbps: 100.0,
            down_mbps: 100.0,
            uplink_bytes_per_round: 52.0,
            downlink_bytes_per_round: 9000.0,
            t_comm_ms_measured: 27.0,
            t_comm_ms_predicted: 27.1,
            tokens_per_round: 2.4,
            throughput_tps: 50.0,
            speedup_measured: 1.2,
            speedup_predicted: 1.21,
            seed: 3,
            time_base: TimeBase::Virtual,
        }
    }

    #[test]
    fn csv_has_one_header_and_stable_columns() {
        let text = render(&[row(), row()], ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("dssd,8,0.61,0.600000,20,100,100,52.000,"));
        assert!(lines[1].ends_with(",3"));
    }

    #[test]
    fn markdown_table_shape() {
        let text = render(&[row()], ReportFormat::Markdown).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].matches("---|").count(), 16);
    }

    #[test]
    fn empty_alpha_for_baseline() {
        let mut r = row();
        r.alpha_measured = None;
        let text = render(&[r], ReportFormat::Csv).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("dssd,8,0.61,,20"));
    }
}
