use crate::numerics::{matmul, FlopCategory, FlopsLedger, Real, Tensor2};
use crate::Result;

/// `scale·(x·A)·B`, booking `4·n·h·r` FLOPs as adapter work.
pub fn lora_delta<T: Real>(
    x: &Tensor2<T>,
    a: &Tensor2<T>,
    b: &Tensor2<T>,
    scale: f64,
    ledger: &mut FlopsLedger,
) -> Result<Tensor2<T>> {
    let xa = matmul(x, a, ledger, FlopCategory::Lora)?;
    let mut out = matmul(&xa, b, ledger, FlopCategory::Lora)?;
    out.scale(T::from_f64(scale));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn zero_b_gives_zero() {
        let mut rng = SeededRng::new(3);
        let x = Tensor2::<f32>::randn(3, 8, 1.0, &mut rng);
        let a = Tensor2::<f32>::randn(8, 2, 1.0, &mut rng);
        let b = Tensor2::<f32>::zeros(2, 8);
        let d = lora_delta(&x, &a, &b, 1.0, &mut FlopsLedger::new()).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_token_rank16_books_4096() {
        let mut rng = SeededRng::new(0);
        let x = Tensor2::<f32>::randn(1, 64, 1.0, &mut rng);
        let a = Tensor2::<f32>::randn(64, 16, 1.0, &mut rng);
        let b = Tensor2::<f32>::randn(16, 64, 1.0, &mut rng);
        let mut ledger = FlopsLedger::new();
        lora_delta(&x, &a, &b, 1.0, &mut ledger).unwrap();
        assert_eq!(ledger.lora(), 4096);
        assert_eq!(ledger.kv_projection() + ledger.other(), 0);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = SeededRng::new(11);
        let (n, h, r) = (5, 12, 3);
        let x = Tensor2::<f32>::randn(n, h, 1.0, &mut rng);
        let a = Tensor2::<f32>::randn(h, r, 1.0, &mut rng);
        let b = Tensor2::<f32>::randn(r, h, 1.0, &mut rng);
        let scale = 2.0;
        let d = lora_delta(&x, &a, &b, scale, &mut FlopsLedger::new()).unwrap();
        for i in 0..n {
            for j in 0..h {
                let mut s = 0.0f64;
                for p in 0..r {
                    let mut xa = 0.0f64;
                    for k in 0..h {
                        xa += x.get(i, k) as f64 * a.get(k, p) as f64;
                    }
                    s += xa * b.get(p, j) as f64;
                }
                assert!((d.get(i, j) as f64 - scale * s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Tensor2::<f32>::zeros(1, 4);
        let a = Tensor2::<f32>::zeros(5, 2);
        let b = Tensor2::<f32>::zeros(2, 4);
        assert!(lora_delta(&x, &a, &b, 1.0, &mut FlopsLedger::new()).is_err());
    }
}
