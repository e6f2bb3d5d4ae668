//! Inter-rater agreement: Cohen's kappa, majority-vote consensus with
//! arbitration, confusion matrices and the chi-squared independence test.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::chi_squared_sf;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgreementError {
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no instances")]
    Empty,
    #[error("both coders use one identical label throughout; kappa undefined")]
    Degenerate,
    #[error("instance {0} has no labels")]
    NoLabels(String),
    #[error("tie on instance {instance} between {} and no arbitration configured", tied.join(", "))]
    Tie { instance: String, tied: Vec<String> },
    #[error("arbitration gave no label for instance {0}")]
    ArbitrationDeclined(String),
    #[error("arbitration chose {label} for instance {instance}, which is not among the tied labels {}", tied.join(", "))]
    ArbitrationOutsideTie {
        instance: String,
        label: String,
        tied: Vec<String>,
    },
    #[error("label {0} is not a category")]
    UnknownCategory(String),
    #[error("matrix has no counts")]
    EmptyMatrix,
    #[error("chi-squared test needs two non-empty rows and columns; degrees of freedom would be 0")]
    ZeroDegreesOfFreedom,
    #[error("no overlapping instances between {0} and {1}")]
    NoOverlap(String, String),
    #[error("need at least 2 coders, found {0}")]
    TooFewCoders(usize),
    #[error("instance {instance} has two labels from coder {coder}")]
    DuplicateLabel { instance: String, coder: String },
    #[error("label file: {0}")]
    Csv(String),
}

impl From<csv::Error> for AgreementError {
    fn from(e: csv::Error) -> Self {
        AgreementError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub n: usize,
}

/// Cohen's kappa for two aligned label sequences.
pub fn cohens_kappa<L: Ord>(a: &[L], b: &[L]) -> Result<KappaResult, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AgreementError::Empty);
    }
    let mut marginals: BTreeMap<&L, (u64, u64)> = BTreeMap::new();
    let mut agree = 0u64;
    for (x, y) in a.iter().zip(b) {
        marginals.entry(x).or_default().0 += 1;
        marginals.entry(y).or_default().1 += 1;
        agree += u64::from(x == y);
    }
    let n = a.len() as u64;
    let nn = n * n;
    let chance: u64 = marginals.values().map(|(ca, cb)| ca * cb).sum();
    if chance == nn {
        return Err(AgreementError::Degenerate);
    }
    // integer numerator and denominator keep kappa(a, a) = 1 and the
    // chance-level case = 0 exact
    let kappa = (n * agree) as f64 - chance as f64;
    let kappa = kappa / (nn - chance) as f64;
    Ok(KappaResult {
        kappa,
        observed_agreement: agree as f64 / n as f64,
        expected_agreement: chance as f64 / nn as f64,
        n: a.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledInstance {
    pub instance_id: String,
    pub labels_by_coder: BTreeMap<String, String>,
}

type Arbiter<'a> = dyn FnMut(&LabelledInstance, &[String]) -> Option<String> + 'a;

/// How ties among the most-voted labels are settled.
pub struct ConsensusPolicy<'a> {
    arbitration: Option<Box<Arbiter<'a>>>,
}

impl<'a> ConsensusPolicy<'a> {
    /// Ties are errors.
    pub fn strict() -> Self {
        Self { arbitration: None }
    }

    /// `arbitrate` receives the instance and its tied labels (sorted) and
    /// returns one of them, or `None` to decline.
    pub fn with_arbitration(arbitrate: impl FnMut(&LabelledInstance, &[String]) -> Option<String> + 'a) -> Self {
        Self {
            arbitration: Some(Box::new(arbitrate)),
        }
    }

    /// Arbitration decisions looked up by instance id.
    pub fn from_table(table: &'a BTreeMap<String, String>) -> Self {
        Self::with_arbitration(move |inst, _| table.get(&inst.instance_id).cloned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsensusOutcome {
    pub labels: BTreeMap<String, String>,
    /// Instances settled by arbitration.
    pub arbitrated: Vec<String>,
}

/// The label with the most votes wins. When several labels share the top
/// count the policy's arbitration picks among them.
pub fn consensus(instances: &[LabelledInstance], policy: &mut ConsensusPolicy<'_>) -> Result<ConsensusOutcome, AgreementError> {
    let mut labels = BTreeMap::new();
    let mut arbitrated = Vec::new();
    for inst in instances {
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for label in inst.labels_by_coder.values() {
            *votes.entry(label).or_default() += 1;
        }
        let top = votes.values().copied().max().ok_or_else(|| AgreementError::NoLabels(inst.instance_id.clone()))?;
        let tied: Vec<String> = votes.iter().filter(|(_, &c)| c == top).map(|(l, _)| l.to_string()).collect();
        let chosen = if tied.len() == 1 {
            tied[0].clone()
        } else {
            let arbitrate = policy.arbitration.as_mut().ok_or_else(|| AgreementError::Tie {
                instance: inst.instance_id.clone(),
                tied: tied.clone(),
            })?;
            let label = arbitrate(inst, &tied).ok_or_else(|| AgreementError::ArbitrationDeclined(inst.instance_id.clone()))?;
            if !tied.contains(&label) {
                return Err(AgreementError::ArbitrationOutsideTie {
                    instance: inst.instance_id.clone(),
                    label,
                    tied,
                });
            }
            arbitrated.push(inst.instance_id.clone());
            label
        };
        labels.insert(inst.instance_id.clone(), chosen);
    }
    Ok(ConsensusOutcome { labels, arbitrated })
}

/// Rows are reference labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.categories.len()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

pub fn confusion_matrix<S: AsRef<str>>(reference: &[S], predicted: &[S], categories: &[String]) -> Result<ConfusionMatrix, AgreementError> {
    if reference.len() != predicted.len() {
        return Err(AgreementError::LengthMismatch(reference.len(), predicted.len()));
    }
    let index: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let find = |l: &S| index.get(l.as_ref()).copied().ok_or_else(|| AgreementError::UnknownCategory(l.as_ref().to_string()));
    let k = categories.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (r, p) in reference.iter().zip(predicted) {
        counts[find(r)?][find(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        categories: categories.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Pearson's chi-squared test of independence between rows and columns,
/// after dropping all-zero rows and columns.
pub fn chi_squared_independence(m: &ConfusionMatrix) -> Result<ChiSquaredResult, AgreementError> {
    let total = m.total();
    if total == 0 {
        return Err(AgreementError::EmptyMatrix);
    }
    let rows: Vec<usize> = m.row_sums().iter().enumerate().filter(|(_, &s)| s > 0).map(|(i, _)| i).collect();
    let col_sums = m.col_sums();
    let cols: Vec<usize> = col_sums.iter().enumerate().filter(|(_, &s)| s > 0).map(|(j, _)| j).collect();
    if rows.len() < 2 || cols.len() < 2 {
        return Err(AgreementError::ZeroDegreesOfFreedom);
    }
    let row_sums = m.row_sums();
    let n = total as f64;
    let mut statistic = 0.0;
    for &i in &rows {
        for &j in &cols {
            let expected = row_sums[i] as f64 * col_sums[j] as f64 / n;
            let d = m.counts[i][j] as f64 - expected;
            statistic += d * d / expected;
        }
    }
    let df = (rows.len() - 1) * (cols.len() - 1);
    Ok(ChiSquaredResult {
        statistic,
        degrees_of_freedom: df,
        p_value: chi_squared_sf(statistic, df as f64),
    })
}

/// One cell of the agreement table. `result` is absent when kappa could not
/// be computed, with the reason in `note`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaCell {
    pub a: String,
    pub b: String,
    pub result: Option<KappaResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaTable {
    pub coders: Vec<String>,
    /// Every unordered coder pair, in coder order.
    pub pairwise: Vec<KappaCell>,
    /// Each coder against the consensus labels.
    pub vs_consensus: Vec<KappaCell>,
}

impl KappaTable {
    pub fn get(&self, a: &str, b: &str) -> Option<&KappaCell> {
        self.pairwise.iter().find(|c| (c.a == a && c.b == b) || (c.a == b && c.b == a))
    }
}

/// Labels by coder then instance.
pub type CoderLabels = BTreeMap<String, BTreeMap<String, String>>;

fn kappa_between(
    x: &BTreeMap<String, String>,
    y: &BTreeMap<String, String>,
    a: &str,
    b: &str,
) -> Result<KappaResult, AgreementError> {
    let (xs, ys): (Vec<&String>, Vec<&String>) = x.iter().filter_map(|(id, l)| y.get(id).map(|m| (l, m))).unzip();
    if xs.is_empty() {
        return Err(AgreementError::NoOverlap(a.to_string(), b.to_string()));
    }
    cohens_kappa(&xs, &ys)
}

fn cell(x: &BTreeMap<String, String>, y: &BTreeMap<String, String>, a: &str, b: &str) -> (KappaCell, Option<AgreementError>) {
    match kappa_between(x, y, a, b) {
        Ok(r) => (
            KappaCell {
                a: a.to_string(),
                b: b.to_string(),
                result: Some(r),
                note: None,
            },
            None,
        ),
        Err(e) => (
            KappaCell {
                a: a.to_string(),
                b: b.to_string(),
                result: None,
                note: Some(e.to_string()),
            },
            Some(e),
        ),
    }
}

/// Builds the table, keeping failed cells with a note. Instances missing a
/// label on either side are excluded pair by pair.
pub fn kappa_cells(labels: &CoderLabels, consensus: &BTreeMap<String, String>) -> (KappaTable, Option<AgreementError>) {
    let coders: Vec<String> = labels.keys().cloned().collect();
    let mut first_error = None;
    let mut keep = |(c, e): (KappaCell, Option<AgreementError>)| {
        if first_error.is_none() {
            first_error = e;
        }
        c
    };
    let mut pairwise = Vec::new();
    for (i, a) in coders.iter().enumerate() {
        for b in &coders[i + 1..] {
            pairwise.push(keep(cell(&labels[a], &labels[b], a, b)));
        }
    }
    let vs_consensus = coders.iter().map(|a| keep(cell(&labels[a], consensus, a, "consensus"))).collect();
    (
        KappaTable {
            coders,
            pairwise,
            vs_consensus,
        },
        first_error,
    )
}

/// Pairwise kappa between all coders plus each coder against consensus.
pub fn pairwise_kappa_table(labels: &CoderLabels, consensus: &BTreeMap<String, String>) -> Result<KappaTable, AgreementError> {
    if labels.len() < 2 {
        return Err(AgreementError::TooFewCoders(labels.len()));
    }
    match kappa_cells(labels, consensus) {
        (table, None) => Ok(table),
        (_, Some(e)) => Err(e),
    }
}

/// Groups rows of a label file into instances and by-coder maps.
pub fn group_labels(rows: &[(String, String, String)]) -> Result<(Vec<LabelledInstance>, CoderLabels), AgreementError> {
    let mut by_instance: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut by_coder: CoderLabels = BTreeMap::new();
    for (instance, coder, label) in rows {
        if by_instance
            .entry(instance.clone())
            .or_default()
            .insert(coder.clone(), label.clone())
            .is_some()
        {
            return Err(AgreementError::DuplicateLabel {
                instance: instance.clone(),
                coder: coder.clone(),
            });
        }
        by_coder.entry(coder.clone()).or_default().insert(instance.clone(), label.clone());
    }
    let instances = by_instance
        .into_iter()
        .map(|(instance_id, labels_by_coder)| LabelledInstance {
            instance_id,
            labels_by_coder,
        })
        .collect();
    Ok((instances, by_coder))
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    instance_id: String,
    coder_id: String,
    label: String,
}

/// Reads `instance_id,coder_id,label` rows.
pub fn read_labels_csv<R: io::Read>(r: R) -> Result<Vec<(String, String, String)>, AgreementError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    reader
        .deserialize::<LabelRow>()
        .map(|row| row.map(|r| (r.instance_id, r.coder_id, r.label)).map_err(AgreementError::from))
        .collect()
}

#[derive(Debug, Deserialize)]
struct ArbitrationRow {
    instance_id: String,
    label: String,
}

/// Reads `instance_id,label` arbitration decisions.
pub fn read_arbitration_csv<R: io::Read>(r: R) -> Result<BTreeMap<String, String>, AgreementError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<ArbitrationRow>() {
        let row = row?;
        out.insert(row.instance_id, row.label);
    }
    Ok(out)
}

/// Agreement of human coders and one model coder over a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub namespace: String,
    pub model_coder: String,
    pub n_instances: usize,
    pub kappa: KappaTable,
    /// Consensus of the human coders, by instance.
    pub consensus: BTreeMap<String, String>,
    pub arbitrated: Vec<String>,
    /// Consensus (rows) against the model (columns).
    pub confusion_matrix: ConfusionMatrix,
    pub chi_squared: Option<ChiSquaredResult>,
    pub notes: Vec<String>,
}

/// Consensus is taken over every coder except `model_coder`; the model is
/// then compared with it like any other coder.
pub fn agreement_report(
    namespace: &str,
    instances: &[LabelledInstance],
    model_coder: &str,
    policy: &mut ConsensusPolicy<'_>,
) -> Result<AgreementReport, AgreementError> {
    let mut notes = Vec::new();
    let human: Vec<LabelledInstance> = instances
        .iter()
        .map(|i| LabelledInstance {
            instance_id: i.instance_id.clone(),
            labels_by_coder: i.labels_by_coder.iter().filter(|(c, _)| *c != model_coder).map(|(c, l)| (c.clone(), l.clone())).collect(),
        })
        .filter(|i| !i.labels_by_coder.is_empty())
        .collect();
    let outcome = consensus(&human, policy)?;

    let mut labels: CoderLabels = BTreeMap::new();
    for inst in instances {
        for (coder, label) in &inst.labels_by_coder {
            labels.entry(coder.clone()).or_default().insert(inst.instance_id.clone(), label.clone());
        }
    }
    if labels.len() < 2 {
        return Err(AgreementError::TooFewCoders(labels.len()));
    }
    let (kappa, first_error) = kappa_cells(&labels, &outcome.labels);
    if let Some(e) = first_error {
        notes.push(format!("some kappa cells are undefined: {e}"));
    }

    let model = labels.get(model_coder).cloned().unwrap_or_default();
    let (reference, predicted): (Vec<&String>, Vec<&String>) =
        outcome.labels.iter().filter_map(|(id, r)| model.get(id).map(|p| (r, p))).unzip();
    let categories: Vec<String> = reference.iter().chain(&predicted).map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let confusion = confusion_matrix(&reference, &predicted, &categories)?;
    let chi_squared = match chi_squared_independence(&confusion) {
        Ok(c) => Some(c),
        Err(e) => {
            notes.push(format!("chi-squared not computed: {e}"));
            None
        }
    };
    Ok(AgreementReport {
        namespace: namespace.to_string(),
        model_coder: model_coder.to_string(),
        n_instances: instances.len(),
        kappa,
        consensus: outcome.labels,
        arbitrated: outcome.arbitrated,
        confusion_matrix: confusion,
        chi_squared,
        notes,
    })
}

/// Kappa grid with one row per coder, one column per coder and a final
/// consensus column. The diagonal is blank; undefined cells read "NA".
pub fn write_kappa_table_csv<W: io::Write>(w: W, t: &KappaTable) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let fmt = |c: Option<&KappaCell>| c.and_then(|c| c.result).map_or("NA".to_string(), |r| format!("{:.3}", r.kappa));
    let mut header = vec!["coder".to_string()];
    header.extend(t.coders.iter().cloned());
    header.push("consensus".into());
    out.write_record(&header)?;
    for a in &t.coders {
        let mut rec = vec![a.clone()];
        for b in &t.coders {
            rec.push(if a == b { String::new() } else { fmt(t.get(a, b)) });
        }
        rec.push(fmt(t.vs_consensus.iter().find(|c| &c.a == a)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
