use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::experiment::ResultRow;

/// One point of an ASR-versus-budget curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrPoint {
    pub eps0: usize,
    /// All rows at this budget, including errors and excluded samples.
    pub rows: usize,
    /// Rows in the denominator.
    pub attacked: usize,
    pub successes: usize,
    /// `successes / attacked`, absent when nothing was attacked.
    pub asr: Option<f64>,
}

/// Aggregate rows per budget. A row enters the denominator unless it carries
/// an error or, with `initially_correct_only`, the clean sample was already
/// misclassified. Budgets listed in `eps0` but absent from `rows` appear with
/// zero counts.
pub fn asr_curve(rows: &[ResultRow], eps0: &[usize], initially_correct_only: bool) -> Vec<AsrPoint> {
    let mut acc: BTreeMap<usize, (usize, usize, usize)> = eps0.iter().map(|&e| (e, (0, 0, 0))).collect();
    for r in rows {
        let e = acc.entry(r.eps0).or_default();
        e.0 += 1;
        if r.error.is_none() && (!initially_correct_only || r.initially_correct) {
            e.1 += 1;
            e.2 += r.success as usize;
        }
    }
    acc.into_iter()
        .map(|(eps0, (rows, attacked, successes))| AsrPoint {
            eps0,
            rows,
            attacked,
            successes,
            asr: (attacked > 0).then(|| successes as f64 / attacked as f64),
        })
        .collect()
}

pub const ASR_HEADER: [&str; 5] = ["eps0", "rows", "attacked", "successes", "asr"];

/// CSV with columns `eps0,rows,attacked,successes,asr`; an undefined ASR is `n/a`.
pub fn write_asr_csv<W: Write>(points: &[AsrPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(ASR_HEADER).map_err(csv_err)?;
    for p in points {
        let asr = p.asr.map_or_else(|| "n/a".to_string(), |a| format!("{a:.6}"));
        w.write_record([p.eps0.to_string(), p.rows.to_string(), p.attacked.to_string(), p.successes.to_string(), asr])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

pub fn asr_csv_string(points: &[AsrPoint]) -> Result<String> {
    let mut buf = Vec::new();
    write_asr_csv(points, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(eps0: usize, success: bool, correct: bool) -> ResultRow {
        ResultRow { eps0, success, raw_success: success, initially_correct: correct, ..ResultRow::blank(0, 0, "sparse") }
    }

    #[test]
    fn seven_of_ten() {
        let rows: Vec<_> = (0..10).map(|i| row(4, i < 7, true)).collect();
        let c = asr_curve(&rows, &[], true);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].attacked, c[0].successes), (10, 7));
        assert!((c[0].asr.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn all_misclassified_is_na() {
        let rows: Vec<_> = (0..3).map(|_| row(2, true, false)).collect();
        let c = asr_curve(&rows, &[2, 8], true);
        assert_eq!(c[0].attacked, 0);
        assert_eq!(c[0].asr, None);
        assert_eq!(c[1].rows, 0);
        let csv = asr_csv_string(&c).unwrap();
        assert_eq!(csv, "eps0,rows,attacked,successes,asr\n2,3,0,0,n/a\n8,0,0,0,n/a\n");
        let all = asr_curve(&rows, &[], false);
        assert_eq!(all[0].attacked, 3);
        assert_eq!(all[0].asr, Some(1.0));
    }

    #[test]
    fn errors_leave_the_denominator() {
        let mut rows = vec![row(4, true, true), row(4, false, true)];
        rows[1].error = Some("boom".into());
        let c = asr_curve(&rows, &[], false);
        assert_eq!((c[0].rows, c[0].attacked, c[0].successes), (2, 1, 1));
    }
}
