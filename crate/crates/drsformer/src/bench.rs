//! Dense against top-k channel attention on random queries, keys and values.

use std::time::Instant;

use drsformer_core::autodiff::{Backend, Eval};
use drsformer_core::blocks::{dense_channel_attention, sparse_attention, temperature};
use drsformer_core::ops::kept_count;
use drsformer_core::verify::random;
use drsformer_core::{ParamStore, Tensor};

use crate::error::{invalid, Result};

/// Largest output change that still counts as "ratio 1 equals dense".
pub const DENSE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub channels: usize,
    pub heads: usize,
    /// Side of the square feature map.
    pub hw: usize,
    pub ratios: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub ratio: f64,
    /// Entries kept per attention row.
    pub kept: usize,
    pub dense_ns: f64,
    pub sparse_ns: f64,
    /// Fraction of attention-map entries that are exactly zero.
    pub sparsity: f64,
    /// Largest absolute difference from the dense output.
    pub deviation: f64,
}

impl BenchRow {
    /// Only the ratio-1 row is held to the dense output.
    pub fn passed(&self) -> bool {
        self.ratio != 1.0 || self.deviation < DENSE_TOLERANCE
    }
}

fn time<R>(reps: usize, mut f: impl FnMut() -> R) -> (f64, R) {
    let mut last = f();
    let start = Instant::now();
    for _ in 0..reps {
        last = std::hint::black_box(f());
    }
    (start.elapsed().as_nanos() as f64 / reps as f64, last)
}

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()).expect("same shape")
}

pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let BenchSpec {
        channels,
        heads,
        hw,
        reps,
        seed,
        ..
    } = *spec;
    if heads == 0 || channels == 0 || channels % heads != 0 {
        return Err(invalid(format!(
            "{channels} channels do not split into {heads} heads"
        )));
    }
    if hw == 0 || reps == 0 || spec.ratios.is_empty() {
        return Err(invalid("hw, reps and the ratio list must be positive"));
    }
    if let Some(r) = spec.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(invalid(format!("ratio {r} outside (0, 1]")));
    }
    let ch = channels / heads;
    let shape = [heads, ch, hw * hw];
    let [q, k, v] = [0, 1, 2].map(|i| to_f32(&random(&shape, seed.wrapping_mul(3).wrapping_add(i), 1.0)));
    let store = ParamStore::<f32>::new();
    let mut b = Eval::new(&store);
    let (q, k, v) = (b.constant(q), b.constant(k), b.constant(v));
    let logits = b.constant(Tensor::zeros(vec![1]));

    let (dense_ns, dense) = time(reps, || {
        dense_channel_attention(&mut Eval::new(&store), &q, &k, &v)
    });
    let dense = dense?.into_owned();
    spec.ratios
        .iter()
        .map(|&ratio| {
            let kept = kept_count(ratio, ch);
            let (sparse_ns, out) = time(reps, || {
                sparse_attention(&mut Eval::new(&store), &q, &k, &v, &logits, &[kept])
            });
            let out = out?;
            let deviation = out
                .data()
                .iter()
                .zip(dense.data())
                .map(|(a, d)| (a - d).abs() as f64)
                .fold(0.0, f64::max);
            let s = b.matmul(&q, &k, true)?;
            let s = b.scale(&s, (1.0 / temperature(ch)) as f32);
            let map = b.top_k_mixture(&s, &logits, &[kept])?;
            let zeros = map.data().iter().filter(|&&a| a == 0.0).count();
            Ok(BenchRow {
                ratio,
                kept,
                dense_ns,
                sparse_ns,
                sparsity: zeros as f64 / map.len() as f64,
                deviation,
            })
        })
        .collect()
}

pub fn render(rows: &[BenchRow]) -> String {
    let mut out = String::from("ratio\tkept\tdense_ns\tsparse_ns\tsparsity\tmax_dev\n");
    for r in rows {
        out.push_str(&format!(
            "{:.4}\t{}\t{:.0}\t{:.0}\t{:.6}\t{:.3e}\n",
            r.ratio, r.kept, r.dense_ns, r.sparse_ns, r.sparsity, r.deviation
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_ratio_zeroes_half_the_map() {
        let rows = run(&BenchSpec {
            channels: 64,
            heads: 1,
            hw: 4,
            ratios: vec![0.5, 1.0],
            reps: 1,
            seed: 3,
        })
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].kept, 32);
        assert_eq!(rows[0].sparsity, 0.5);
        assert_eq!(rows[1].sparsity, 0.0);
        assert!(rows[1].deviation < DENSE_TOLERANCE && rows.iter().all(BenchRow::passed));
    }
}
