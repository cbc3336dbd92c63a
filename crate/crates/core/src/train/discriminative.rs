//! Push-pull loss on point embeddings: points are pulled to within `delta_v`
//! of their instance mean, and instance means are pushed at least
//! `2 delta_d` apart.

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminativeLoss {
    pub pull: f64,
    pub push: f64,
    /// `N x F`, row-major.
    pub d_phi: Vec<f64>,
}

impl DiscriminativeLoss {
    pub fn total(&self) -> f64 {
        self.pull + self.push
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `phi` is `N x dim`; `instance[i]` indexes `0..instances` or is `None` for
/// points outside every instance. Instances without points are skipped.
pub fn discriminative_loss(
    phi: &[f64],
    dim: usize,
    instance: &[Option<usize>],
    instances: usize,
    delta_v: f64,
    delta_d: f64,
) -> DiscriminativeLoss {
    let n = instance.len();
    debug_assert_eq!(phi.len(), n * dim);
    let mut count = vec![0usize; instances];
    let mut mean = vec![0.0; instances * dim];
    for (i, inst) in instance.iter().enumerate() {
        if let Some(k) = *inst {
            count[k] += 1;
            for f in 0..dim {
                mean[k * dim + f] += phi[i * dim + f];
            }
        }
    }
    let live: Vec<usize> = (0..instances).filter(|&k| count[k] > 0).collect();
    for &k in &live {
        for f in 0..dim {
            mean[k * dim + f] /= count[k] as f64;
        }
    }
    let mut d_phi = vec![0.0; n * dim];
    let mut d_mean = vec![0.0; instances * dim];
    let mut pull = 0.0;
    let mut push = 0.0;
    if live.is_empty() {
        return DiscriminativeLoss { pull, push, d_phi };
    }

    let inv_c = 1.0 / live.len() as f64;
    let mut diff = vec![0.0; dim];
    for (i, inst) in instance.iter().enumerate() {
        let Some(k) = *inst else { continue };
        for f in 0..dim {
            diff[f] = mean[k * dim + f] - phi[i * dim + f];
        }
        let d = norm(&diff);
        let hinge = d - delta_v;
        if hinge <= 0.0 {
            continue;
        }
        let w = inv_c / count[k] as f64;
        pull += w * hinge * hinge;
        let s = w * 2.0 * hinge / d;
        for f in 0..dim {
            d_mean[k * dim + f] += s * diff[f];
            d_phi[i * dim + f] -= s * diff[f];
        }
    }

    let pairs = live.len() * (live.len() - 1) / 2;
    if pairs > 0 {
        let inv_p = 1.0 / pairs as f64;
        for (ai, &a) in live.iter().enumerate() {
            for &b in &live[ai + 1..] {
                for f in 0..dim {
                    diff[f] = mean[a * dim + f] - mean[b * dim + f];
                }
                let d = norm(&diff);
                let hinge = 2.0 * delta_d - d;
                if hinge <= 0.0 {
                    continue;
                }
                push += inv_p * hinge * hinge;
                if d > 0.0 {
                    let s = -inv_p * 2.0 * hinge / d;
                    for f in 0..dim {
                        d_mean[a * dim + f] += s * diff[f];
                        d_mean[b * dim + f] -= s * diff[f];
                    }
                }
            }
        }
    }

    // every instance mean is the average of its points
    for (i, inst) in instance.iter().enumerate() {
        if let Some(k) = *inst {
            let c = count[k] as f64;
            for f in 0..dim {
                d_phi[i * dim + f] += d_mean[k * dim + f] / c;
            }
        }
    }
    DiscriminativeLoss { pull, push, d_phi }
}
