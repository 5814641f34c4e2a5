//! Differentiable ops. Each forward validates shapes eagerly and registers a
//! closure that maps the output gradient back onto the inputs.

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Scalar, Tensor, TensorError};

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = self.expect_rank2("matmul")?;
        let (k2, n) = rhs.expect_rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a = ctx.parent_data(0);
                let b = ctx.parent_data(1);
                // dA = dC·Bᵗ, dB = Aᵗ·dC
                ctx.add_grad(0, &matmul_nt_raw(ctx.out_grad, &b, m, n, k));
                ctx.add_grad(1, &matmul_tn_raw(&a, ctx.out_grad, k, m, n));
            },
        )
    }

    pub fn transpose(&self) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("transpose")?;
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Tensor::from_op(vec![c, r], out, vec![self.clone()], move |ctx| {
            ctx.with_grad_mut(0, |g| {
                for j in 0..c {
                    for i in 0..r {
                        g[i * c + j] = g[i * c + j] + ctx.out_grad[j * r + i];
                    }
                }
            });
        })
    }

    fn zip_same_shape(
        &self,
        rhs: &Tensor<T>,
        op: &'static str,
    ) -> Result<(), TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_same_shape(rhs, "add")?;
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |ctx| {
                ctx.add_grad(0, ctx.out_grad);
                ctx.add_grad(1, ctx.out_grad);
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_same_shape(rhs, "sub")?;
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |ctx| {
                ctx.add_grad(0, ctx.out_grad);
                ctx.with_grad_mut(1, |g| {
                    for (dst, &src) in g.iter_mut().zip(ctx.out_grad) {
                        *dst = *dst - src;
                    }
                });
            },
        )
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_same_shape(rhs, "mul")?;
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            |ctx| {
                let a = ctx.parent_data(0);
                let b = ctx.parent_data(1);
                let da: Vec<T> = ctx.out_grad.iter().zip(b.iter()).map(|(&g, &v)| g * v).collect();
                let db: Vec<T> = ctx.out_grad.iter().zip(a.iter()).map(|(&g, &v)| g * v).collect();
                ctx.add_grad(0, &da);
                ctx.add_grad(1, &db);
            },
        )
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>, TensorError> {
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let da: Vec<T> = ctx.out_grad.iter().map(|&g| g * c).collect();
            ctx.add_grad(0, &da);
        })
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>, TensorError> {
        let out = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |ctx| {
            ctx.add_grad(0, ctx.out_grad);
        })
    }

    /// `1 - x`, the usual gate complement.
    pub fn one_minus(&self) -> Result<Tensor<T>, TensorError> {
        let out = self.data().iter().map(|&v| T::one() - v).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |ctx| {
            ctx.with_grad_mut(0, |g| {
                for (dst, &src) in g.iter_mut().zip(ctx.out_grad) {
                    *dst = *dst - src;
                }
            });
        })
    }

    pub fn relu(&self) -> Result<Tensor<T>, TensorError> {
        let out = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |ctx| {
            let x = ctx.parent_data(0);
            let da: Vec<T> = ctx
                .out_grad
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            ctx.add_grad(0, &da);
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>, TensorError> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |ctx| {
            let da: Vec<T> = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            ctx.add_grad(0, &da);
        })
    }

    /// Softmax over the last axis of a rank-2 tensor, max-subtracted per row.
    pub fn row_softmax(&self) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("row_softmax")?;
        if c == 0 {
            return Err(TensorError::Rank {
                op: "row_softmax",
                rank: 2,
                shape: self.shape().to_vec(),
            });
        }
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o / sum;
            }
        }
        drop(src);
        Tensor::from_op(vec![r, c], out, vec![self.clone()], move |ctx| {
            // dx = s ⊙ (g − ⟨g, s⟩) per row
            let mut da = vec![T::zero(); r * c];
            for i in 0..r {
                let s = &ctx.out_data[i * c..(i + 1) * c];
                let g = &ctx.out_grad[i * c..(i + 1) * c];
                let dot = s.iter().zip(g).fold(T::zero(), |acc, (&sv, &gv)| acc + sv * gv);
                for ((d, &sv), &gv) in da[i * c..(i + 1) * c].iter_mut().zip(s).zip(g) {
                    *d = sv * (gv - dot);
                }
            }
            ctx.add_grad(0, &da);
        })
    }

    /// Row-wise sum: `[r, c] -> [r, 1]`.
    pub fn row_sum(&self) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("row_sum")?;
        let src = self.data();
        let out: Vec<T> = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().cloned().sum())
            .collect();
        drop(src);
        Tensor::from_op(vec![r, 1], out, vec![self.clone()], move |ctx| {
            ctx.with_grad_mut(0, |g| {
                for i in 0..r {
                    let gi = ctx.out_grad[i];
                    for v in &mut g[i * c..(i + 1) * c] {
                        *v = *v + gi;
                    }
                }
            });
        })
    }

    /// Row-wise mean: `[r, c] -> [r, 1]`.
    pub fn row_mean(&self) -> Result<Tensor<T>, TensorError> {
        let (_, c) = self.expect_rank2("row_mean")?;
        let inv = T::one() / T::from_usize(c).expect("axis fits scalar");
        self.row_sum()?.scale(inv)
    }

    pub fn sum_all(&self) -> Result<Tensor<T>, TensorError> {
        let total: T = self.data().iter().cloned().sum();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], |ctx| {
            ctx.with_grad_mut(0, |g| {
                let go = ctx.out_grad[0];
                for v in g.iter_mut() {
                    *v = *v + go;
                }
            });
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>, TensorError> {
        let n = self.len().max(1);
        let inv = T::one() / T::from_usize(n).expect("length fits scalar");
        self.sum_all()?.scale(inv)
    }

    /// Elementwise `(x + eps)^(-1/2)`; the RMS normaliser's denominator.
    pub fn rsqrt_add(&self, eps: T) -> Result<Tensor<T>, TensorError> {
        let out: Vec<T> = self.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |ctx| {
            // d/dx (x+e)^(-1/2) = -y³/2
            let half = T::of_f64(0.5);
            let da: Vec<T> = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(&g, &y)| -half * y * y * y * g)
                .collect();
            ctx.add_grad(0, &da);
        })
    }

    /// Broadcast-multiply each row of `[r, c]` by the matching entry of a
    /// `[r, 1]` column.
    pub fn bcast_mul_col(&self, col: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("bcast_mul_col")?;
        let (cr, cc) = col.expect_rank2("bcast_mul_col")?;
        if cr != r || cc != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "bcast_mul_col",
                lhs: self.shape().to_vec(),
                rhs: col.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = col.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let s = b[i];
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(&a[i * c..(i + 1) * c]) {
                *o = v * s;
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), col.clone()],
            move |ctx| {
                let a = ctx.parent_data(0);
                let b = ctx.parent_data(1);
                let mut da = vec![T::zero(); r * c];
                let mut db = vec![T::zero(); r];
                for i in 0..r {
                    let s = b[i];
                    let mut acc = T::zero();
                    for j in 0..c {
                        let g = ctx.out_grad[i * c + j];
                        da[i * c + j] = g * s;
                        acc = acc + g * a[i * c + j];
                    }
                    db[i] = acc;
                }
                ctx.add_grad(0, &da);
                ctx.add_grad(1, &db);
            },
        )
    }

    /// Broadcast-multiply every row of `[r, c]` by a length-`c` vector.
    pub fn bcast_mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("bcast_mul_row")?;
        if row.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "bcast_mul_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = row.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = a[i * c + j] * b[j];
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            move |ctx| {
                let a = ctx.parent_data(0);
                let b = ctx.parent_data(1);
                let mut da = vec![T::zero(); r * c];
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        let g = ctx.out_grad[i * c + j];
                        da[i * c + j] = g * b[j];
                        db[j] = db[j] + g * a[i * c + j];
                    }
                }
                ctx.add_grad(0, &da);
                ctx.add_grad(1, &db);
            },
        )
    }

    /// Broadcast-add a length-`c` bias vector to every row of `[r, c]`.
    pub fn bcast_add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("bcast_add_row")?;
        if row.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "bcast_add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = row.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = a[i * c + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            move |ctx| {
                ctx.add_grad(0, ctx.out_grad);
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] = db[j] + ctx.out_grad[i * c + j];
                    }
                }
                ctx.add_grad(1, &db);
            },
        )
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("slice_cols")?;
        if start + width > c {
            return Err(TensorError::Range {
                op: "slice_cols",
                start,
                end: start + width,
                size: c,
            });
        }
        let src = self.data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        drop(src);
        Tensor::from_op(vec![r, width], out, vec![self.clone()], move |ctx| {
            ctx.with_grad_mut(0, |g| {
                for i in 0..r {
                    for j in 0..width {
                        g[i * c + start + j] = g[i * c + start + j] + ctx.out_grad[i * width + j];
                    }
                }
            });
        })
    }

    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("slice_rows")?;
        if start + count > r {
            return Err(TensorError::Range {
                op: "slice_rows",
                start,
                end: start + count,
                size: r,
            });
        }
        let out = self.data()[start * c..(start + count) * c].to_vec();
        Tensor::from_op(vec![count, c], out, vec![self.clone()], move |ctx| {
            ctx.with_grad_mut(0, |g| {
                for (dst, &src) in g[start * c..(start + count) * c]
                    .iter_mut()
                    .zip(ctx.out_grad)
                {
                    *dst = *dst + src;
                }
            });
        })
    }

    /// Replaces the elements where `mask` is true with a constant. Gradients
    /// flow only through unmasked positions; combined with softmax this gives
    /// masked entries exactly zero weight when `value` is a large negative.
    /// Mean negative log-likelihood of one target column per row:
    /// `-(1/r) Σ ln self[i, targets[i]]`. Rows must hold strictly positive
    /// probabilities at the target positions.
    pub fn nll_rows(&self, targets: &[usize]) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.expect_rank2("nll_rows")?;
        if targets.len() != r {
            return Err(TensorError::DataLength {
                shape: self.shape().to_vec(),
                expect: r,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfBounds {
                op: "nll_rows",
                index: bad,
                size: c,
            });
        }
        let data = self.data();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            total = total + data[i * c + t].ln();
        }
        drop(data);
        let inv = T::of_f64(-1.0 / r as f64);
        let targets = targets.to_vec();
        Tensor::from_op(
            vec![1],
            vec![total * inv],
            vec![self.clone()],
            move |ctx| {
                let g = ctx.out_grad[0];
                let p = ctx.parent_data(0);
                let mut da = vec![T::zero(); p.len()];
                for (i, &t) in targets.iter().enumerate() {
                    da[i * c + t] = g * inv / p[i * c + t];
                }
                drop(p);
                ctx.add_grad(0, &da);
            },
        )
    }

    pub fn masked_fill(&self, mask: &[bool], value: T) -> Result<Tensor<T>, TensorError> {
        if mask.len() != self.len() {
            return Err(TensorError::DataLength {
                shape: self.shape().to_vec(),
                expect: self.len(),
                got: mask.len(),
            });
        }
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let mask = mask.to_vec();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let da: Vec<T> = ctx
                .out_grad
                .iter()
                .zip(&mask)
                .map(|(&g, &m)| if m { T::zero() } else { g })
                .collect();
            ctx.add_grad(0, &da);
        })
    }
}

/// Concatenates rank-2 tensors along columns; all parts share a row count.
pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::EmptyInput { op: "concat_cols" });
    }
    let (r, _) = parts[0].expect_rank2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = p.expect_rank2("concat_cols")?;
        if pr != r {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.data();
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
    }
    Tensor::from_op(vec![r, total], out, parts.to_vec(), move |ctx| {
        let mut offset = 0;
        for (idx, &w) in widths.iter().enumerate() {
            let mut da = vec![T::zero(); r * w];
            for i in 0..r {
                da[i * w..(i + 1) * w]
                    .copy_from_slice(&ctx.out_grad[i * total + offset..i * total + offset + w]);
            }
            ctx.add_grad(idx, &da);
            offset += w;
        }
    })
}

/// Concatenates rank-2 tensors along rows; all parts share a column count.
/// Parts with zero rows are legal and contribute nothing.
pub fn concat_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::EmptyInput { op: "concat_rows" });
    }
    let (_, c) = parts[0].expect_rank2("concat_rows")?;
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = p.expect_rank2("concat_rows")?;
        if pc != c {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        row_counts.push(pr);
    }
    let total: usize = row_counts.iter().sum();
    let mut out = Vec::with_capacity(total * c);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    Tensor::from_op(vec![total, c], out, parts.to_vec(), move |ctx| {
        let mut offset = 0;
        for (idx, &rc) in row_counts.iter().enumerate() {
            ctx.add_grad(idx, &ctx.out_grad[offset * c..(offset + rc) * c]);
            offset += rc;
        }
    })
}

/// Gathers rows of `table` (`[v, d]`) by id: output `[ids.len(), d]`. The
/// backward pass scatter-adds into the table, so tied embeddings accumulate.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, TensorError> {
    let (v, d) = table.expect_rank2("embedding")?;
    let src = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(TensorError::IndexOutOfBounds {
                op: "embedding",
                index: id,
                size: v,
            });
        }
        out.extend_from_slice(&src[id * d..(id + 1) * d]);
    }
    drop(src);
    let ids = ids.to_vec();
    Tensor::from_op(vec![ids.len(), d], out, vec![table.clone()], move |ctx| {
        ctx.with_grad_mut(0, |g| {
            for (row, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for j in 0..d {
                    g[id * d + j] = g[id * d + j] + ctx.out_grad[row * d + j];
                }
            }
        });
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::param(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_by_hand() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn row_softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.0, 5.0]);
        let s = x.row_softmax().unwrap();
        let d = s.to_vec();
        for i in 0..2 {
            let sum: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        // dL/dx for L = sum(w ⊙ softmax(x)) via the fused rule, against the
        // explicit jacobian J[j,k] = s_j (δ_jk − s_k).
        let x = t(&[1, 3], &[0.1, -0.4, 0.9]);
        let w = Tensor::from_vec(&[1, 3], vec![0.7, -1.1, 0.3]).unwrap();
        let s = x.row_softmax().unwrap();
        let loss = s.mul(&w).unwrap().sum_all().unwrap();
        let g = grad(&loss, &[x.clone()]).unwrap();
        let got = g.get(&x).unwrap();

        let sv = s.to_vec();
        let wv = w.to_vec();
        for j in 0..3 {
            let mut expect = 0.0;
            for k in 0..3 {
                let jac = sv[k] * (if j == k { 1.0 } else { 0.0 } - sv[j]);
                expect += wv[k] * jac;
            }
            assert!((got[j] - expect).abs() < 1e-12, "{} vs {}", got[j], expect);
        }
    }

    #[test]
    fn grad_zero_for_unreachable_param() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let loss = a.sum_all().unwrap();
        let g = grad(&loss, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(g.get(&a).unwrap(), &vec![1.0, 1.0]);
        assert_eq!(g.get(&b).unwrap(), &vec![0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_when_param_used_twice() {
        let a = t(&[2], &[2.0, 3.0]);
        // L = sum(a ⊙ a) → dL/da = 2a
        let loss = a.mul(&a).unwrap().sum_all().unwrap();
        let g = grad(&loss, &[a.clone()]).unwrap();
        assert_eq!(g.get(&a).unwrap(), &vec![4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let a = t(&[2], &[1.0, 2.0]);
        let err = grad(&a, &[a.clone()]).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn embedding_gathers_and_scatter_adds() {
        let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = e.sum_all().unwrap();
        let g = grad(&loss, &[table.clone()]).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(g.get(&table).unwrap(), &vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let table = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(
            embedding(&table, &[3]).unwrap_err(),
            TensorError::IndexOutOfBounds { index: 3, size: 3, .. }
        ));
    }

    #[test]
    fn slice_concat_round_trip() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = x.slice_cols(0, 2).unwrap();
        let right = x.slice_cols(2, 2).unwrap();
        let back = concat_cols(&[left, right]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let top = x.slice_rows(0, 1).unwrap();
        let bottom = x.slice_rows(1, 1).unwrap();
        let back = concat_rows(&[top, bottom]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = x.masked_fill(&[false, true, false], -1e30).unwrap();
        let loss = y.sum_all().unwrap();
        let g = grad(&loss, &[x.clone()]).unwrap();
        assert_eq!(g.get(&x).unwrap(), &vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn detached_subgraph_skips_backward() {
        let frozen = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let derived = frozen.scale(3.0).unwrap();
        assert!(derived.grad().is_none());
        let p = t(&[2], &[1.0, 1.0]);
        let loss = derived.mul(&p).unwrap().sum_all().unwrap();
        let g = grad(&loss, &[p.clone()]).unwrap();
        assert_eq!(g.get(&p).unwrap(), &vec![3.0, 6.0]);
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn transpose_backward_routes_gradient() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::from_vec(&[3, 2], (1..=6).map(f64::from).collect()).unwrap();
        let loss = x.transpose().unwrap().mul(&w).unwrap().sum_all().unwrap();
        let g = grad(&loss, &[x.clone()]).unwrap();
        // grad of xᵗ⊙w wrt x is wᵗ
        assert_eq!(g.get(&x).unwrap(), &vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn nll_rows_matches_hand_value_and_gradient() {
        let p = t(&[2, 3], &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8]);
        let loss = p.nll_rows(&[1, 2]).unwrap();
        let want = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((loss.item().unwrap() - want).abs() < 1e-12);

        let g = grad(&loss, &[p.clone()]).unwrap();
        let gp = g.get(&p).unwrap();
        // only target cells carry gradient: -1/(2 p)
        assert!((gp[1] - (-0.5 / 0.5)).abs() < 1e-12);
        assert!((gp[5] - (-0.5 / 0.8)).abs() < 1e-12);
        assert_eq!(gp[0], 0.0);
        assert_eq!(gp[2], 0.0);
        assert_eq!(gp[3], 0.0);
        assert_eq!(gp[4], 0.0);
    }

    #[test]
    fn nll_rows_rejects_bad_targets() {
        let p = t(&[2, 3], &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8]);
        assert!(p.nll_rows(&[0]).is_err());
        assert!(p.nll_rows(&[0, 3]).is_err());
    }
}
