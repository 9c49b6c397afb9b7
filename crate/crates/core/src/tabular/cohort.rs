use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ColumnKind, ColumnSpec, FeatureTable, TabularError, Value};

/// Columns that drive the label, in the order of [`CohortSpec::effects`].
pub const SIGNAL_FEATURES: [&str; 3] = ["age", "comorbidity_count", "biomarker"];

const LABS: [&str; 15] = [
    "hemoglobin",
    "wbc",
    "platelets",
    "sodium",
    "potassium",
    "creatinine",
    "bun",
    "glucose",
    "albumin",
    "alt",
    "ast",
    "bilirubin",
    "calcium",
    "lactate",
    "inr",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n: usize,
    /// Target fraction of positive labels, in (0, 1).
    pub prevalence: f64,
    /// Log-odds per standard deviation of each signal feature.
    pub effects: [f64; 3],
    /// Weight of the nonlinear terms (an age-biomarker interaction and a
    /// comorbidity threshold effect).
    pub nonlinear: f64,
    /// Missing fraction for labs, BMI and the biomarker.
    pub missing_rate: f64,
    /// 0 makes missingness independent of the label; up to 1 concentrates it
    /// on positives while keeping the overall rate.
    pub informative_missingness: f64,
    pub comorbidities: usize,
    pub treatments: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n: 2000,
            prevalence: 0.2,
            effects: [1.0, 0.8, 1.2],
            nonlinear: 0.0,
            missing_rate: 0.1,
            informative_missingness: 0.0,
            comorbidities: 20,
            treatments: 8,
            seed: 0,
        }
    }
}

struct Builder {
    columns: Vec<ColumnSpec>,
    values: Vec<Vec<Value>>,
}

impl Builder {
    fn add(&mut self, name: &str, kind: ColumnKind, values: Vec<Value>) {
        self.columns.push(ColumnSpec {
            name: name.to_string(),
            kind,
        });
        self.values.push(values);
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[(&'a str, f64)]) -> &'a str {
    let mut u = rng.random::<f64>();
    for &(s, p) in options {
        if u < p {
            return s;
        }
        u -= p;
    }
    options.last().unwrap().0
}

/// Synthetic admissions table with labels drawn from a logistic model over
/// [`SIGNAL_FEATURES`]. The intercept is solved by bisection so the mean
/// label probability equals the prevalence. Every other column is
/// independent noise.
pub fn synth_cohort(spec: &CohortSpec) -> Result<FeatureTable, TabularError> {
    if !(spec.prevalence > 0.0 && spec.prevalence < 1.0) {
        return Err(TabularError::InvalidConfig("prevalence must lie in (0, 1)".into()));
    }
    if !(0.0..1.0).contains(&spec.missing_rate) || !(0.0..=1.0).contains(&spec.informative_missingness) {
        return Err(TabularError::InvalidConfig("missingness rates out of range".into()));
    }
    if spec.n == 0 {
        return Err(TabularError::NoRows);
    }
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let z = |rng: &mut ChaCha8Rng| -> f64 { std_normal.sample(rng) };

    let z_age: Vec<f64> = (0..n).map(|_| z(&mut rng).clamp(-3.3, 2.5)).collect();
    let cmb_count: Vec<f64> = (0..n).map(|_| (3.0 + 2.0 * z(&mut rng)).round().max(0.0)).collect();
    let z_cmb: Vec<f64> = cmb_count.iter().map(|c| (c - 3.0) / 2.0).collect();
    let z_bio: Vec<f64> = (0..n).map(|_| z(&mut rng)).collect();

    let signal: Vec<f64> = (0..n)
        .map(|i| {
            let linear = spec.effects[0] * z_age[i] + spec.effects[1] * z_cmb[i] + spec.effects[2] * z_bio[i];
            let bent = z_age[i] * z_bio[i] + 2.0 * (if z_cmb[i] > 1.0 { 1.0 } else { 0.0 } - 0.16);
            linear + spec.nonlinear * bent
        })
        .collect();
    let mean_p = |b: f64| signal.iter().map(|s| sigmoid(s + b)).sum::<f64>() / n as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < spec.prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);
    let labels: Vec<usize> = signal
        .iter()
        .map(|s| usize::from(rng.random_bool(sigmoid(s + intercept))))
        .collect();

    let s = spec.informative_missingness;
    let (rate_pos, rate_neg) = (
        (spec.missing_rate * (1.0 + s)).min(0.95),
        spec.missing_rate * (1.0 - s * spec.prevalence / (1.0 - spec.prevalence)),
    );
    let missable = |rng: &mut ChaCha8Rng, raw: Vec<f64>, rate_scale: f64| -> Vec<Value> {
        raw.into_iter()
            .zip(&labels)
            .map(|(v, &y)| {
                let rate = rate_scale * if y == 1 { rate_pos } else { rate_neg };
                if rng.random_bool(rate.min(1.0)) {
                    Value::Missing
                } else {
                    Value::Num(v)
                }
            })
            .collect()
    };

    let mut b = Builder {
        columns: Vec::new(),
        values: Vec::new(),
    };
    let num = |v: Vec<f64>| v.into_iter().map(Value::Num).collect::<Vec<_>>();
    b.add(
        "age",
        ColumnKind::Continuous,
        num(z_age.iter().map(|z| (62.0 + 13.0 * z).round()).collect()),
    );
    let sex: Vec<Value> = (0..n)
        .map(|_| Value::Cat(pick(&mut rng, &[("F", 0.9), ("M", 0.1)]).into()))
        .collect();
    b.add("sex", ColumnKind::Categorical, sex);
    let eth: Vec<Value> = (0..n)
        .map(|_| {
            Value::Cat(
                pick(
                    &mut rng,
                    &[("white", 0.6), ("black", 0.15), ("hispanic", 0.1), ("asian", 0.08), ("other", 0.07)],
                )
                .into(),
            )
        })
        .collect();
    b.add("ethnicity", ColumnKind::Categorical, eth);
    let ins: Vec<Value> = (0..n)
        .map(|_| Value::Cat(pick(&mut rng, &[("medicare", 0.45), ("medicaid", 0.15), ("private", 0.4)]).into()))
        .collect();
    b.add("insurance", ColumnKind::Categorical, ins);
    let bmi: Vec<f64> = (0..n).map(|_| (28.0 + 5.0 * z(&mut rng)).max(14.0)).collect();
    let bmi = missable(&mut rng, bmi, 1.0);
    b.add("bmi", ColumnKind::Continuous, bmi);
    b.add("comorbidity_count", ColumnKind::Continuous, num(cmb_count));
    let bio: Vec<f64> = z_bio.iter().map(|z| 25.0 + 8.0 * z).collect();
    let bio = missable(&mut rng, bio, 1.0);
    b.add("biomarker", ColumnKind::Continuous, bio);

    for k in 0..spec.comorbidities {
        let p = 0.03 + 0.27 * ((k * 7) % 11) as f64 / 10.0;
        let v = (0..n).map(|_| Value::Num(if rng.random_bool(p) { 1.0 } else { 0.0 })).collect();
        b.add(&format!("cmb_{k:02}"), ColumnKind::Binary, v);
    }
    for (k, lab) in LABS.iter().enumerate() {
        let (mu, sd) = (10.0 + 7.0 * k as f64, 1.0 + (k % 4) as f64);
        let base: Vec<f64> = (0..n).map(|_| mu + sd * z(&mut rng)).collect();
        let spread: Vec<f64> = (0..n).map(|_| sd * (0.2 + 0.5 * rng.random::<f64>())).collect();
        // one draw decides whether the whole aggregate triple is missing
        let present = missable(&mut rng, vec![0.0; n], 1.0);
        for (agg, sign) in [("mean", 0.0), ("min", -1.0), ("max", 1.0)] {
            let v = (0..n)
                .map(|i| match present[i] {
                    Value::Missing => Value::Missing,
                    _ => Value::Num(base[i] + sign * spread[i]),
                })
                .collect();
            b.add(&format!("lab_{lab}_{agg}"), ColumnKind::Continuous, v);
        }
    }
    for k in 0..2 {
        let v: Vec<Value> = (0..n)
            .map(|_| {
                if rng.random_bool(0.85) {
                    Value::Missing
                } else {
                    Value::Num(5.0 + z(&mut rng))
                }
            })
            .collect();
        b.add(&format!("lab_rare_{k}_mean"), ColumnKind::Continuous, v);
    }
    for k in 0..spec.treatments {
        let p = 0.1 + 0.05 * k as f64;
        let v = (0..n).map(|_| Value::Num(if rng.random_bool(p) { 1.0 } else { 0.0 })).collect();
        b.add(&format!("tx_{k:02}"), ColumnKind::Binary, v);
    }

    let table = FeatureTable {
        columns: b.columns,
        values: b.values,
        row_ids: (0..n).map(|i| format!("P{i:06}")).collect(),
        labels: Some(labels),
    };
    table.validate()?;
    Ok(table)
}
