//! Two-component PCA by power iteration on the centred Gram matrix.

const ITERATIONS: usize = 1000;
const TOL: f64 = 1e-12;

fn top_eigen(g: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = g.len();
    let mut u: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_75).fract())
        .collect();
    let mut lambda = 0.0;
    for _ in 0..ITERATIONS {
        let mut next: Vec<f64> = (0..n).map(|i| g[i].iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, vec![0.0; n]);
        }
        next.iter_mut().for_each(|v| *v /= norm);
        let diff: f64 = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).sum();
        u = next;
        lambda = norm;
        if diff < TOL {
            break;
        }
    }
    (lambda, u)
}

/// Projects each row onto the first two principal components. Each
/// component's sign makes its largest-magnitude loading positive.
pub fn pca2(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    // Eigenvalues below this share of the total variance are rounding residue.
    let floor = 1e-12 * (0..n).map(|i| g[i][i]).sum::<f64>();
    let mut out = vec![[0.0; 2]; n];
    for comp in 0..2 {
        let (lambda, mut u) = top_eigen(&g);
        if lambda <= floor {
            break;
        }
        // Loading direction v ∝ Xᵀu; fix its sign.
        let v: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i][j] * u[i]).sum()).collect();
        let lead = v
            .iter()
            .fold(0.0f64, |best, &c| if c.abs() > best.abs() { c } else { best });
        if lead < 0.0 {
            u.iter_mut().for_each(|c| *c = -*c);
        }
        let s = lambda.sqrt();
        for i in 0..n {
            out[i][comp] = s * u[i];
        }
        for i in 0..n {
            for j in 0..n {
                g[i][j] -= lambda * u[i] * u[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_preserves_pairwise_distance_on_a_line() {
        let rows = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 8.0]];
        let p = pca2(&rows);
        assert!(((p[2][0] - p[0][0]).abs() - 10.0).abs() < 1e-9);
        assert!(p.iter().all(|q| q[1].abs() < 1e-9));
    }

    #[test]
    fn empty_and_constant() {
        assert!(pca2(&[]).is_empty());
        let p = pca2(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(p, vec![[0.0, 0.0]; 2]);
    }
}
