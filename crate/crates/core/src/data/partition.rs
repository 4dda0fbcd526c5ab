use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionScheme {
    Iid,
    /// Each client has a master label `client mod M`; a sample of label `l`
    /// goes to a master-`l` client with probability `q`, otherwise to a
    /// client of a uniformly chosen other label.
    LabelSkew {
        q: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub client_shards: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
}

/// Splits sample indices `0..labels.len()` among `num_clients`.
pub fn partition(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return config("need at least one client");
    }
    if num_clients > labels.len() {
        return config(format!("{num_clients} clients but only {} samples", labels.len()));
    }
    let mut r = rng::rng(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut r);
    let mut shards = vec![Vec::new(); num_clients];
    match scheme {
        PartitionScheme::Iid => {
            for (k, idx) in order.into_iter().enumerate() {
                shards[k % num_clients].push(idx);
            }
        }
        PartitionScheme::LabelSkew { q } => {
            if !(0.0..=1.0).contains(&q) {
                return config(format!("label-skew q={q} outside [0, 1]"));
            }
            let m = num_classes.max(1);
            let groups: Vec<Vec<usize>> = (0..m)
                .map(|l| (0..num_clients).filter(|c| c % m == l).collect())
                .collect();
            for idx in order {
                let label = labels[idx] % m;
                let group = if m == 1 || r.random::<f64>() < q {
                    label
                } else {
                    let g = r.random_range(0..m - 1);
                    if g >= label {
                        g + 1
                    } else {
                        g
                    }
                };
                let client = if groups[group].is_empty() {
                    r.random_range(0..num_clients)
                } else {
                    groups[group][r.random_range(0..groups[group].len())]
                };
                shards[client].push(idx);
            }
            // A client left empty by chance takes a sample from the largest shard.
            for c in 0..num_clients {
                if shards[c].is_empty() {
                    let donor = (0..num_clients)
                        .max_by_key(|&d| (shards[d].len(), usize::MAX - d))
                        .unwrap();
                    let moved = shards[donor].pop().unwrap();
                    shards[c].push(moved);
                }
            }
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(PartitionPlan {
        client_shards: shards,
        scheme,
    })
}
