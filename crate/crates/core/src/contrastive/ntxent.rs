//! Normalized temperature-scaled cross entropy over a batch of 2N latents in
//! which rows `2m` and `2m + 1` are the two views of source patch `m`.

use crate::autodiff::{CustomOp, Real, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

const MIN_NORM: f64 = 1e-12;

/// Index of the positive partner of row `i`.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(dim_err!("cosine_sim length mismatch: {} vs {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= MIN_NORM || nv <= MIN_NORM {
        return Err(Error::Numeric("cosine similarity of a near-zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Latent vectors `z` (`[2N, K]`) with their temperature.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    rows: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(rows: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if rows.len() < 2 || !rows.len().is_multiple_of(2) {
            return Err(dim_err!("contrastive batch needs an even number >= 2 of rows, got {}", rows.len()));
        }
        if rows.iter().any(|r| r.len() != rows[0].len() || r.is_empty()) {
            return Err(dim_err!("contrastive rows must share one nonzero dimension"));
        }
        if !(temperature > 0.0) {
            return Err(Error::Param(format!("temperature {temperature} must be > 0")));
        }
        Ok(Self { rows, temperature })
    }

    pub fn from_tensor<T: Real>(z: &Tensor<T>, temperature: f64) -> Result<Self> {
        if z.shape().len() != 2 {
            return Err(dim_err!("latents must be [2N, K], got {:?}", z.shape()));
        }
        let k = z.shape()[1];
        let rows = z
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        Self::new(rows, temperature)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `l(i, j) = -log( exp(sim_ij / t) / sum_{k != i} exp(sim_ik / t) )`,
    /// evaluated with log-sum-exp.
    pub fn pair_loss(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.len() || j != partner(i) {
            return Err(Error::Param(format!("({i}, {j}) is not a positive pair")));
        }
        let sims = (0..self.len())
            .filter(|&k| k != i)
            .map(|k| Ok((k, cosine_sim(&self.rows[i], &self.rows[k])? / self.temperature)))
            .collect::<Result<Vec<_>>>()?;
        let m = sims.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sims.iter().map(|&(_, s)| (s - m).exp()).sum::<f64>().ln();
        let pos = sims.iter().find(|&&(k, _)| k == j).map(|&(_, s)| s).expect("partner present");
        Ok(lse - pos)
    }

    /// Mean of `l(i, partner(i))` over all 2N rows, i.e. both orders of every pair.
    pub fn batch_loss(&self) -> Result<f64> {
        let total = (0..self.len())
            .map(|i| self.pair_loss(i, partner(i)))
            .sum::<Result<f64>>()?;
        Ok(total / self.len() as f64)
    }
}

struct NtXentOp<T: Real> {
    unit: Vec<T>,
    norms: Vec<T>,
    /// Row-softmax over `k != i` of the scaled similarities; zero diagonal.
    probs: Vec<T>,
    rows: usize,
    dim: usize,
    temperature: T,
}

impl<T: Real> CustomOp<T> for NtXentOp<T> {
    fn name(&self) -> &'static str {
        "ntxent"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let (n, k) = (self.rows, self.dim);
        let scale = grad_out[0] / T::from_usize(n).expect("row count");
        // G[i][k] = dL/ds_ik
        let mut g = self.probs.clone();
        for i in 0..n {
            g[i * n + partner(i)] -= T::one();
        }
        let mut dz = vec![T::zero(); n * k];
        for i in 0..n {
            let mut du = vec![T::zero(); k];
            for j in 0..n {
                let c = (g[i * n + j] + g[j * n + i]) * scale / self.temperature;
                if c == T::zero() {
                    continue;
                }
                for (d, &u) in du.iter_mut().zip(&self.unit[j * k..(j + 1) * k]) {
                    *d += c * u;
                }
            }
            let ui = &self.unit[i * k..(i + 1) * k];
            let radial: T = du.iter().zip(ui).map(|(&a, &b)| a * b).sum();
            for d in 0..k {
                dz[i * k + d] = (du[d] - radial * ui[d]) / self.norms[i];
            }
        }
        vec![Some(dz)]
    }
}

/// Records the batch NT-Xent loss of `z` (`[2N, K]`) on the tape.
pub fn ntxent_loss<T: Real>(tape: &mut Tape<T>, z: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] < 2 || !shape[0].is_multiple_of(2) {
        return Err(dim_err!("ntxent expects [2N, K] latents, got {shape:?}"));
    }
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature {temperature} must be > 0")));
    }
    let (n, k) = (shape[0], shape[1]);
    let tau = T::from_f64_lossy(temperature);
    let data = tape.value(z).data();
    let mut unit = data.to_vec();
    let mut norms = Vec::with_capacity(n);
    for row in unit.chunks_mut(k) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm.to_f64_lossy() <= MIN_NORM {
            return Err(Error::Numeric("ntxent latent vector has near-zero norm".into()));
        }
        row.iter_mut().for_each(|v| *v = *v / norm);
        norms.push(norm);
    }
    let mut probs = vec![T::zero(); n * n];
    let mut total = T::zero();
    for i in 0..n {
        let ui = &unit[i * k..(i + 1) * k];
        let row = &mut probs[i * n..(i + 1) * n];
        let mut m = T::neg_infinity();
        for j in (0..n).filter(|&j| j != i) {
            let s = ui.iter().zip(&unit[j * k..(j + 1) * k]).map(|(&a, &b)| a * b).sum::<T>() / tau;
            row[j] = s;
            m = m.max(s);
        }
        let pos = row[partner(i)];
        let mut z_sum = T::zero();
        for j in (0..n).filter(|&j| j != i) {
            row[j] = (row[j] - m).exp();
            z_sum += row[j];
        }
        for j in (0..n).filter(|&j| j != i) {
            row[j] = row[j] / z_sum;
        }
        total += m + z_sum.ln() - pos;
    }
    let loss = total / T::from_usize(n).expect("row count");
    let op = NtXentOp { unit, norms, probs, rows: n, dim: k, temperature: tau };
    tape.custom(vec![z], Tensor::scalar(loss), Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert!((cosine_sim(&[1.0, -3.0], &[-1.0, 3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_pair_is_zero() {
        let b = ContrastiveBatch::new(vec![vec![0.3, 0.4], vec![0.3, 0.4]], 0.5).unwrap();
        assert!(b.pair_loss(0, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_four_rows() {
        // sims from row 0: +1 (partner), 0, 0  => -log(e / (e + 2))
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let b = ContrastiveBatch::new(rows, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + 2.0)).ln();
        assert!((b.pair_loss(0, 1).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.5514).abs() < 1e-4);
        assert!(b.pair_loss(0, 2).is_err());
    }

    #[test]
    fn identical_rows_give_log_three() {
        let b = ContrastiveBatch::new(vec![vec![2.0, -1.0]; 4], 1.0).unwrap();
        assert!((b.batch_loss().unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_value_matches_batch_loss() {
        let rows = vec![vec![0.2, 0.9, -0.1], vec![0.3, 0.8, 0.0], vec![-0.5, 0.1, 0.7], vec![-0.4, 0.3, 0.6]];
        let b = ContrastiveBatch::new(rows.clone(), 0.1).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![4, 3], rows.concat()).unwrap());
        let l = ntxent_loss(&mut tape, z, 0.1).unwrap();
        assert!((tape.value(l).data()[0] - b.batch_loss().unwrap()).abs() < 1e-12);
    }
}
