//! Confusion counts, the seven imbalanced-classification criteria, macro
//! averaging across tasks, and the results table.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(
            "confusion",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// The seven reported criteria, in table order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    Precision,
    Recall,
    F1,
    F2,
    F05,
    BalancedAccuracy,
    Mcc,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::Precision,
        Criterion::Recall,
        Criterion::F1,
        Criterion::F2,
        Criterion::F05,
        Criterion::BalancedAccuracy,
        Criterion::Mcc,
    ];

    /// Short machine name used in CSV headers and CLI flags.
    pub fn key(self) -> &'static str {
        match self {
            Criterion::Precision => "precision",
            Criterion::Recall => "recall",
            Criterion::F1 => "f1",
            Criterion::F2 => "f2",
            Criterion::F05 => "f05",
            Criterion::BalancedAccuracy => "bacc",
            Criterion::Mcc => "mcc",
        }
    }

    /// Column title in the text table.
    pub fn title(self) -> &'static str {
        match self {
            Criterion::Precision => "Precision",
            Criterion::Recall => "Recall",
            Criterion::F1 => "F1",
            Criterion::F2 => "F2",
            Criterion::F05 => "F0.5",
            Criterion::BalancedAccuracy => "BAcc",
            Criterion::Mcc => "MCC",
        }
    }

    /// Label used in row names such as "Meta DS (best meta F1)".
    pub fn label(self) -> &'static str {
        match self {
            Criterion::Recall => "Rec",
            Criterion::Precision => "Prec",
            other => other.title(),
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.key() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown criterion {s}")))
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub f05: f64,
    pub bacc: f64,
    pub mcc: f64,
}

impl Scores {
    pub fn get(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Precision => self.precision,
            Criterion::Recall => self.recall,
            Criterion::F1 => self.f1,
            Criterion::F2 => self.f2,
            Criterion::F05 => self.f05,
            Criterion::BalancedAccuracy => self.bacc,
            Criterion::Mcc => self.mcc,
        }
    }

    fn get_mut(&mut self, c: Criterion) -> &mut f64 {
        match c {
            Criterion::Precision => &mut self.precision,
            Criterion::Recall => &mut self.recall,
            Criterion::F1 => &mut self.f1,
            Criterion::F2 => &mut self.f2,
            Criterion::F05 => &mut self.f05,
            Criterion::BalancedAccuracy => &mut self.bacc,
            Criterion::Mcc => &mut self.mcc,
        }
    }

    pub fn set(&mut self, c: Criterion, v: f64) {
        *self.get_mut(c) = v;
    }

    pub fn values(&self) -> [f64; 7] {
        Criterion::ALL.map(|c| self.get(c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScorecard {
    pub task: String,
    pub scores: Scores,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    ratio((1.0 + b2) * precision * recall, b2 * precision + recall)
}

/// Evaluates all seven criteria; zero denominators yield 0.
pub fn score(c: &ConfusionCounts) -> Scores {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let tnr = ratio(tn, tn + fp);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if denom == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / denom.sqrt()
    };
    Scores {
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        f2: f_beta(precision, recall, 2.0),
        f05: f_beta(precision, recall, 0.5),
        bacc: (recall + tnr) / 2.0,
        mcc,
    }
}

pub fn scorecard(task: impl Into<String>, predictions: &[bool], labels: &[bool]) -> Result<TaskScorecard> {
    Ok(TaskScorecard {
        task: task.into(),
        scores: score(&confusion(predictions, labels)?),
    })
}

/// Unweighted mean of each criterion across tasks.
pub fn aggregate(cards: &[TaskScorecard]) -> Result<Scores> {
    if cards.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero scorecards".into()));
    }
    let mut out = Scores::default();
    for c in Criterion::ALL {
        let total: f64 = cards.iter().map(|s| s.scores.get(c)).sum();
        *out.get_mut(c) = total / cards.len() as f64;
    }
    Ok(out)
}

/// Pools counts across tasks before scoring. Diagnostic only.
pub fn micro_aggregate(counts: &[ConfusionCounts]) -> Scores {
    let mut total = ConfusionCounts::default();
    for c in counts {
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        total.tn += c.tn;
    }
    score(&total)
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub selection: String,
    pub scores: Scores,
}

pub const RESULTS_HEADER: [&str; 10] = [
    "dataset",
    "model",
    "selection",
    "precision",
    "recall",
    "f1",
    "f2",
    "f05",
    "bacc",
    "mcc",
];

pub fn render_results_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let mut rec = vec![r.dataset.clone(), r.model.clone(), r.selection.clone()];
        rec.extend(r.scores.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_results_csv(text: &str, origin: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let mut vals = [0.0; 7];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = rec[3 + j].parse().map_err(|_| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: format!("bad number `{}`", &rec[3 + j]),
            })?;
        }
        let mut scores = Scores::default();
        for (c, v) in Criterion::ALL.into_iter().zip(vals) {
            *scores.get_mut(c) = v;
        }
        rows.push(ResultRow {
            dataset: rec[0].to_string(),
            model: rec[1].to_string(),
            selection: rec[2].to_string(),
            scores,
        });
    }
    Ok(rows)
}

/// Aligned text rendering with three decimals.
pub fn render_results_table(rows: &[ResultRow]) -> String {
    let model_names: Vec<String> = rows
        .iter()
        .map(|r| {
            if r.selection.is_empty() {
                r.model.clone()
            } else {
                format!("{} ({})", r.model, r.selection)
            }
        })
        .collect();
    let dw = rows.iter().map(|r| r.dataset.len()).chain([7]).max().unwrap();
    let mw = model_names.iter().map(String::len).chain([5]).max().unwrap();
    let mut out = String::new();
    let _ = write!(out, "{:<dw$}  {:<mw$}", "Dataset", "Model");
    for c in Criterion::ALL {
        let _ = write!(out, "  {:>9}", c.title());
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(dw + mw + 2 + 11 * 7));
    for (r, name) in rows.iter().zip(&model_names) {
        let _ = write!(out, "{:<dw$}  {:<mw$}", r.dataset, name);
        for v in r.scores.values() {
            let _ = write!(out, "  {v:>9.3}");
        }
        out.push('\n');
    }
    out
}

/// Mean scores of every candidate configuration, and the winner per criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<String>,
    pub scores: Vec<Scores>,
}

impl SelectionReport {
    pub fn new(candidates: Vec<String>, scores: Vec<Scores>) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != scores.len() {
            return Err(Error::InvalidArgument(format!(
                "{} candidates with {} score rows",
                candidates.len(),
                scores.len()
            )));
        }
        Ok(SelectionReport { candidates, scores })
    }

    /// Index maximizing `c`; ties go to the smaller index.
    pub fn best(&self, c: Criterion) -> usize {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if s.get(c) > self.scores[best].get(c) {
                best = i;
            }
        }
        best
    }

    pub fn render_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["index".to_string(), "candidate".to_string()];
        header.extend(Criterion::ALL.iter().map(|c| c.key().to_string()));
        w.write_record(&header)?;
        for (i, (name, s)) in self.candidates.iter().zip(&self.scores).enumerate() {
            let mut rec = vec![i.to_string(), name.clone()];
            rec.extend(s.values().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut candidates = Vec::new();
        let mut scores = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut s = Scores::default();
            for (j, c) in Criterion::ALL.into_iter().enumerate() {
                *s.get_mut(c) = rec.get(2 + j).unwrap_or_default().parse().map_err(|_| {
                    Error::Parse {
                        path: origin.to_path_buf(),
                        line: i + 2,
                        message: "bad score".into(),
                    }
                })?;
            }
            candidates.push(rec.get(1).unwrap_or_default().to_string());
            scores.push(s);
        }
        SelectionReport::new(candidates, scores)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in Criterion::ALL {
            let b = self.best(c);
            let _ = writeln!(
                out,
                "best {:<9} #{b:<3} {:.4}  {}",
                c.title(),
                self.scores[b].get(c),
                self.candidates[b]
            );
        }
        out.push('\n');
        let w = self.candidates.iter().map(String::len).max().unwrap_or(9).max(9);
        let _ = write!(out, "{:>3}  {:<w$}", "#", "candidate");
        for c in Criterion::ALL {
            let _ = write!(out, "  {:>9}", c.title());
        }
        out.push('\n');
        for (i, (name, s)) in self.candidates.iter().zip(&self.scores).enumerate() {
            let _ = write!(out, "{i:>3}  {name:<w$}");
            for v in s.values() {
                let _ = write!(out, "  {v:>9.4}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_counts() {
        let y = [true, false, true, false];
        assert_eq!(
            confusion(&y, &y).unwrap(),
            ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 2 }
        );
        let all_pos = [true; 5];
        let neg = [false; 5];
        let c = confusion(&all_pos, &neg).unwrap();
        assert_eq!((c.tp, c.fp), (0, 5));
        // hand tally: tp at 0,3,7; fp at 1,8; fn at 2,9; tn at 4,5,6
        let pred = [true, true, false, true, false, false, false, true, true, false];
        let lab = [true, false, true, true, false, false, false, true, false, true];
        assert_eq!(
            confusion(&pred, &lab).unwrap(),
            ConfusionCounts { tp: 3, fp: 2, fn_: 2, tn: 3 }
        );
        assert!(confusion(&pred, &lab[..3]).is_err());
    }

    #[test]
    fn fixed_case_values() {
        let s = score(&ConfusionCounts { tp: 90, fp: 10, fn_: 10, tn: 890 });
        // 90·890 − 100 = 80000; √(100·100·900·900) = 90000
        assert!((s.mcc - 80000.0 / 90000.0).abs() < 1e-12);
        assert!((s.bacc - (0.9 + 890.0 / 900.0) / 2.0).abs() < 1e-12);
        assert!((s.f1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_positive() {
        let s = score(&ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 6 });
        assert!(s.values().iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let s = score(&ConfusionCounts { tp: 4, fp: 6, fn_: 0, tn: 0 });
        assert_eq!(s.bacc, 0.5);
        assert_eq!(s.mcc, 0.0);
    }

    #[test]
    fn zero_denominators_yield_zero() {
        let s = score(&ConfusionCounts { tp: 0, fp: 0, fn_: 5, tn: 5 });
        assert_eq!((s.precision, s.f1, s.f2, s.f05, s.mcc), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregate_is_macro_mean() {
        let mk = |f1| TaskScorecard {
            task: "t".into(),
            scores: Scores { f1, ..Scores::default() },
        };
        assert!((aggregate(&[mk(0.4), mk(0.8)]).unwrap().f1 - 0.6).abs() < 1e-15);
        assert_eq!(aggregate(&[mk(0.3)]).unwrap().f1, 0.3);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn results_csv_round_trip_and_header_only() {
        let rows = vec![ResultRow {
            dataset: "Synthetic".into(),
            model: "Meta DS".into(),
            selection: "best meta F1".into(),
            scores: score(&ConfusionCounts { tp: 7, fp: 3, fn_: 2, tn: 101 }),
        }];
        let text = render_results_csv(&rows).unwrap();
        assert!(text.starts_with("dataset,model,selection,precision,recall,f1,f2,f05,bacc,mcc\n"));
        assert_eq!(parse_results_csv(&text, Path::new("m")).unwrap(), rows);
        let empty = render_results_csv(&[]).unwrap();
        assert_eq!(empty.lines().count(), 1);
        let table = render_results_table(&rows);
        let header = table.lines().next().unwrap();
        let order: Vec<usize> = ["Precision", "Recall", "F1", "F2", "F0.5", "BAcc", "MCC"]
            .iter()
            .map(|t| header.find(t).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500)
            .prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
    }

    proptest! {
        #[test]
        fn mcc_in_range(c in counts()) {
            let s = score(&c);
            prop_assert!((-1.0..=1.0).contains(&s.mcc));
            for v in s.values() {
                prop_assert!(v.is_finite());
            }
        }

        #[test]
        fn equal_precision_recall_gives_equal_fbeta(tp in 1u64..300, err in 0u64..300) {
            let s = score(&ConfusionCounts { tp, fp: err, fn_: err, tn: 1000 });
            prop_assert!((s.f1 - s.precision).abs() < 1e-12);
            prop_assert!((s.f2 - s.precision).abs() < 1e-12);
            prop_assert!((s.f05 - s.precision).abs() < 1e-12);
        }

        #[test]
        fn fbeta_increases_with_tp(tp in 0u64..300, fp in 1u64..300, fn_ in 1u64..300) {
            let a = score(&ConfusionCounts { tp, fp, fn_, tn: 50 });
            let b = score(&ConfusionCounts { tp: tp + 1, fp, fn_, tn: 50 });
            prop_assert!(b.f1 > a.f1 && b.f2 > a.f2 && b.f05 > a.f05);
        }

        #[test]
        fn macro_mean_ignores_order(fs in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            let cards: Vec<TaskScorecard> = fs.iter().map(|&f1| TaskScorecard {
                task: String::new(), scores: Scores { f1, ..Scores::default() } }).collect();
            let mut rev = cards.clone();
            rev.reverse();
            prop_assert!((aggregate(&cards).unwrap().f1 - aggregate(&rev).unwrap().f1).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_ties_go_to_first_and_csv_round_trips() {
        let a = Scores { f1: 0.5, f2: 0.9, ..Scores::default() };
        let b = Scores { f1: 0.7, f2: 0.9, ..Scores::default() };
        let r = SelectionReport::new(vec!["a".into(), "b".into()], vec![a, b]).unwrap();
        assert_eq!(r.best(Criterion::F1), 1);
        assert_eq!(r.best(Criterion::F2), 0);
        let back = SelectionReport::parse_csv(&r.render_csv().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, r);
        let single = SelectionReport::new(vec!["only".into()], vec![a]).unwrap();
        assert!(Criterion::ALL.iter().all(|&c| single.best(c) == 0));
    }

    #[test]
    fn mcc_is_one_only_for_perfect_split() {
        assert_eq!(score(&ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 2 }).mcc, 1.0);
        assert!(score(&ConfusionCounts { tp: 3, fp: 1, fn_: 0, tn: 2 }).mcc < 1.0);
    }
}
