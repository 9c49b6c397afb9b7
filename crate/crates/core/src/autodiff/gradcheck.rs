use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Feed, Graph, GraphError, Mode};

/// Gradients smaller than this are compared in absolute rather than relative terms.
/// Central differences at eps 1e-6 carry about 1e-10 of rounding noise, so a
/// structurally zero gradient would otherwise read as a 1e-4 relative error.
pub const ABSOLUTE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name, flat index, analytic and numeric gradient at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABSOLUTE_FLOOR)
}

/// Compares backpropagated gradients with central differences on a random
/// subsample of at least `samples` trainable scalars (all of them if fewer
/// exist). Train mode is used with a fixed dropout seed so every evaluation
/// sees the same masks.
pub fn grad_check(
    graph: &Graph,
    feed: &Feed,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, GraphError> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(GraphError::InvalidGraph(format!(
            "finite-difference step {epsilon} outside (0, 1e-3]"
        )));
    }
    let loss = graph.loss_node()?;
    let mode = Mode::Train { seed };
    let mut g = graph.clone();
    g.forward(feed, mode)?;
    g.backward(loss)?;

    let trainable: Vec<usize> = (0..g.params().len()).filter(|&p| g.params()[p].trainable).collect();
    let per_tensor = samples.div_ceil(trainable.len().max(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut picks = Vec::new();
    for &p in &trainable {
        let len = g.params()[p].tensor.len();
        let k = per_tensor.min(len);
        for i in rand::seq::index::sample(&mut rng, len, k) {
            picks.push((p, i));
        }
    }

    let loss_at = |g: &mut Graph| -> Result<f64, GraphError> {
        g.forward(feed, mode)?;
        Ok(g.value(loss).expect("loss computed").data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (p, i) in picks {
        let analytic = g.params()[p].tensor.grad().expect("trainable grad")[i];
        let original = g.params()[p].tensor.data()[i];
        g.params_mut()[p].tensor.data_mut()[i] = original + epsilon;
        let plus = loss_at(&mut g)?;
        g.params_mut()[p].tensor.data_mut()[i] = original - epsilon;
        let minus = loss_at(&mut g)?;
        g.params_mut()[p].tensor.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((g.params()[p].name.clone(), i, analytic, numeric));
        }
    }
    Ok(report)
}
