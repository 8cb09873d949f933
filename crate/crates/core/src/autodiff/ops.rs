//! Op library for the tape. Forward computes values eagerly; each op installs
//! a closure that maps the node's gradient onto its parents.
//!
//! Matrices are row-major `[rows, cols]`. Reductions return shape `[1]`.

use super::tensor::{make, Tensor};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "add");
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        make(self.shape().to_vec(), data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            });
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "sub");
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        make(self.shape().to_vec(), data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(&g.iter().map(|x| -x).collect::<Vec<_>>());
            });
        })
    }

    /// Elementwise product. Passing the same tensor twice differentiates
    /// correctly because gradient accumulation is additive.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "mul");
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        make(self.shape().to_vec(), data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        pa.accumulate_grad(&g.iter().zip(b).map(|(gi, bi)| gi * bi).collect::<Vec<_>>());
                        pb.accumulate_grad(&g.iter().zip(a).map(|(gi, ai)| gi * ai).collect::<Vec<_>>());
                    })
                });
            });
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| c * x).collect());
        let p = self.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| p.accumulate_grad(&g.iter().map(|x| c * x).collect::<Vec<_>>()));
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect());
        let p = self.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| p.accumulate_grad(g));
        })
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x.max(0.0)).collect());
        let p = self.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                p.with_data(|a| {
                    p.accumulate_grad(&g.iter().zip(a).map(|(gi, ai)| if *ai > 0.0 { *gi } else { 0.0 }).collect::<Vec<_>>());
                });
            });
        })
    }

    pub fn tanh_act(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x.tanh()).collect());
        let p = self.clone();
        let saved = data.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                p.accumulate_grad(&g.iter().zip(&saved).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect::<Vec<_>>());
            });
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect());
        let p = self.clone();
        let saved = data.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                p.accumulate_grad(&g.iter().zip(&saved).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect::<Vec<_>>());
            });
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x.exp()).collect());
        let p = self.clone();
        let saved = data.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                p.accumulate_grad(&g.iter().zip(&saved).map(|(gi, yi)| gi * yi).collect::<Vec<_>>());
            });
        })
    }

    /// Clamp with pass-through gradient on `[lo, hi]` and zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x.clamp(lo, hi)).collect());
        let p = self.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                p.with_data(|a| {
                    p.accumulate_grad(
                        &g.iter().zip(a).map(|(gi, ai)| if *ai >= lo && *ai <= hi { *gi } else { 0.0 }).collect::<Vec<_>>(),
                    );
                });
            });
        })
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min_elem(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "min_elem");
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x.min(*y)).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        make(self.shape().to_vec(), data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        let mut ga = vec![0.0; a.len()];
                        let mut gb = vec![0.0; b.len()];
                        for i in 0..a.len() {
                            if a[i] <= b[i] {
                                ga[i] = g[i];
                            } else {
                                gb[i] = g[i];
                            }
                        }
                        pa.accumulate_grad(&ga);
                        pb.accumulate_grad(&gb);
                    })
                });
            });
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.with_data(|a| a.iter().sum());
        let p = self.clone();
        make(vec![1], vec![s], vec![p.clone()], move |out| {
            out.with_grad(|g| p.accumulate_grad(&vec![g[0]; p.numel()]));
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(1.0 / n as f64)
    }

    pub fn dot(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 1, "dot: expects vectors");
        assert_same_shape(self, other, "dot");
        let s = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()));
        let (pa, pb) = (self.clone(), other.clone());
        make(vec![1], vec![s], vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        pa.accumulate_grad(&b.iter().map(|x| g[0] * x).collect::<Vec<_>>());
                        pb.accumulate_grad(&a.iter().map(|x| g[0] * x).collect::<Vec<_>>());
                    })
                });
            });
        })
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = mat_dims(self, "matmul lhs");
        let (k2, n) = mat_dims(other, "matmul rhs");
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let data = self.with_data(|a| other.with_data(|b| raw_matmul(a, b, m, k, n)));
        let (pa, pb) = (self.clone(), other.clone());
        make(vec![m, n], data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        // dA = dC . B^T ; dB = A^T . dC
                        pa.accumulate_grad(&raw_matmul_nt(g, b, m, n, k));
                        pb.accumulate_grad(&raw_matmul_tn(a, g, m, k, n));
                    })
                });
            });
        })
    }

    /// `A . B^T` for `A [m,k]`, `B [n,k]`, avoiding a materialized transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k) = mat_dims(self, "matmul_nt lhs");
        let (n, k2) = mat_dims(other, "matmul_nt rhs");
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let data = self.with_data(|a| other.with_data(|b| raw_matmul_nt(a, b, m, k, n)));
        let (pa, pb) = (self.clone(), other.clone());
        make(vec![m, n], data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        // C = A.B^T : dA = dC . B ; dB = dC^T . A
                        pa.accumulate_grad(&raw_matmul(g, b, m, n, k));
                        pb.accumulate_grad(&raw_matmul_tn(g, a, m, n, k));
                    })
                });
            });
        })
    }

    /// Matrix-vector product `[m,k] x [k] -> [m]`.
    pub fn matvec(&self, x: &Tensor) -> Tensor {
        let (m, k) = mat_dims(self, "matvec lhs");
        assert_eq!(x.shape(), [k], "matvec: rhs shape {:?} vs inner dim {k}", x.shape());
        let data = self.with_data(|a| {
            x.with_data(|v| {
                let mut y = vec![0.0; m];
                for i in 0..m {
                    let row = &a[i * k..(i + 1) * k];
                    y[i] = row.iter().zip(v).map(|(p, q)| p * q).sum();
                }
                y
            })
        });
        let (pa, px) = (self.clone(), x.clone());
        make(vec![m], data, vec![pa.clone(), px.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    px.with_data(|v| {
                        let mut da = vec![0.0; m * k];
                        let mut dx = vec![0.0; k];
                        for i in 0..m {
                            let gi = g[i];
                            if gi != 0.0 {
                                let row = &a[i * k..(i + 1) * k];
                                for j in 0..k {
                                    da[i * k + j] = gi * v[j];
                                    dx[j] += gi * row[j];
                                }
                            }
                        }
                        pa.accumulate_grad(&da);
                        px.accumulate_grad(&dx);
                    })
                });
            });
        })
    }

    /// Adds a bias row to every row of a matrix: `[n,d] + [d]`.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Tensor {
        let (n, d) = mat_dims(self, "add_row_broadcast lhs");
        assert_eq!(bias.shape(), [d], "add_row_broadcast: bias shape {:?} vs cols {d}", bias.shape());
        let data = self.with_data(|a| {
            bias.with_data(|b| {
                let mut y = a.to_vec();
                for i in 0..n {
                    for j in 0..d {
                        y[i * d + j] += b[j];
                    }
                }
                y
            })
        });
        let (pa, pb) = (self.clone(), bias.clone());
        make(vec![n, d], data, vec![pa.clone(), pb.clone()], move |out| {
            out.with_grad(|g| {
                pa.accumulate_grad(g);
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
                pb.accumulate_grad(&db);
            });
        })
    }

    /// Mean over rows: `[n,d] -> [d]`.
    pub fn mean_rows(&self) -> Tensor {
        let (n, _) = mat_dims(self, "mean_rows");
        self.mean_rows_range(0, n)
    }

    /// Mean over the row slice `start..end`: `[n,d] -> [d]`.
    pub fn mean_rows_range(&self, start: usize, end: usize) -> Tensor {
        let (n, d) = mat_dims(self, "mean_rows_range");
        assert!(start < end && end <= n, "bad row range {start}..{end} for {n} rows");
        let m = end - start;
        let data = self.with_data(|a| {
            let mut y = vec![0.0; d];
            for i in start..end {
                for j in 0..d {
                    y[j] += a[i * d + j];
                }
            }
            for v in &mut y {
                *v /= m as f64;
            }
            y
        });
        let p = self.clone();
        make(vec![d], data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                let mut dx = vec![0.0; n * d];
                for i in start..end {
                    for j in 0..d {
                        dx[i * d + j] = g[j] / m as f64;
                    }
                }
                p.accumulate_grad(&dx);
            });
        })
    }

    /// Row extraction `[n,d] -> [d]`.
    pub fn row(&self, i: usize) -> Tensor {
        let (n, d) = mat_dims(self, "row");
        assert!(i < n, "row index {i} out of range {n}");
        let data = self.with_data(|a| a[i * d..(i + 1) * d].to_vec());
        let p = self.clone();
        make(vec![d], data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                let mut dx = vec![0.0; n * d];
                dx[i * d..(i + 1) * d].copy_from_slice(g);
                p.accumulate_grad(&dx);
            });
        })
    }

    /// Contiguous 1-D slice `[n] -> [b-a]`.
    pub fn slice(&self, a: usize, b: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "slice: expects a vector");
        let n = self.numel();
        assert!(a <= b && b <= n, "slice bounds {a}..{b} out of range {n}");
        let data = self.with_data(|v| v[a..b].to_vec());
        let p = self.clone();
        make(vec![b - a], data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                let mut dx = vec![0.0; n];
                dx[a..b].copy_from_slice(g);
                p.accumulate_grad(&dx);
            });
        })
    }

    /// Scalar extraction from a vector.
    pub fn index(&self, i: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "index: expects a vector");
        let n = self.numel();
        assert!(i < n, "index {i} out of range {n}");
        let v = self.with_data(|a| a[i]);
        let p = self.clone();
        make(vec![1], vec![v], vec![p.clone()], move |out| {
            out.with_grad(|g| {
                let mut dx = vec![0.0; n];
                dx[i] = g[0];
                p.accumulate_grad(&dx);
            });
        })
    }

    /// Broadcast multiply by a scalar tensor.
    pub fn scale_by(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "scale_by: scalar expected, got {:?}", s.shape());
        let sv = s.value();
        let data = self.with_data(|a| a.iter().map(|x| sv * x).collect());
        let (pa, ps) = (self.clone(), s.clone());
        make(self.shape().to_vec(), data, vec![pa.clone(), ps.clone()], move |out| {
            out.with_grad(|g| {
                pa.with_data(|a| {
                    ps.with_data(|sv| {
                        pa.accumulate_grad(&g.iter().map(|x| sv[0] * x).collect::<Vec<_>>());
                        ps.accumulate_grad(&[g.iter().zip(a).map(|(gi, ai)| gi * ai).sum()]);
                    })
                });
            });
        })
    }

    /// Temperature softmax over a vector, max-subtracted for stability.
    /// Panics on `tau <= 0`.
    pub fn softmax_temperature(&self, tau: f64) -> Tensor {
        assert_eq!(self.shape().len(), 1, "softmax_temperature: expects a vector");
        assert!(tau > 0.0, "softmax_temperature: non-positive temperature {tau}");
        let data = self.with_data(|l| raw_softmax(l, tau));
        let p = self.clone();
        let saved = data.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                p.accumulate_grad(&raw_softmax_backward(g, &saved, tau));
            });
        })
    }

    /// Row-wise temperature softmax over `[n,d]`.
    pub fn softmax_rows(&self, tau: f64) -> Tensor {
        let (n, d) = mat_dims(self, "softmax_rows");
        assert!(tau > 0.0, "softmax_rows: non-positive temperature {tau}");
        let data = self.with_data(|a| {
            let mut y = Vec::with_capacity(n * d);
            for i in 0..n {
                y.extend(raw_softmax(&a[i * d..(i + 1) * d], tau));
            }
            y
        });
        let p = self.clone();
        let saved = data.clone();
        make(vec![n, d], data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let gi = &g[i * d..(i + 1) * d];
                    let pi = &saved[i * d..(i + 1) * d];
                    dx[i * d..(i + 1) * d].copy_from_slice(&raw_softmax_backward(gi, pi, tau));
                }
                p.accumulate_grad(&dx);
            });
        })
    }

    /// Numerically stable `log(softmax(x))` over a vector.
    pub fn log_softmax(&self) -> Tensor {
        assert_eq!(self.shape().len(), 1, "log_softmax: expects a vector");
        let data = self.with_data(|l| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            l.iter().map(|x| x - lse).collect::<Vec<_>>()
        });
        let p = self.clone();
        let saved = data.clone();
        make(self.shape().to_vec(), data, vec![p.clone()], move |out| {
            out.with_grad(|g| {
                let gsum: f64 = g.iter().sum();
                p.accumulate_grad(&g.iter().zip(&saved).map(|(gi, yi)| gi - yi.exp() * gsum).collect::<Vec<_>>());
            });
        })
    }

    /// Concatenation of vectors.
    pub fn concat(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        for p in parts {
            assert_eq!(p.shape().len(), 1, "concat: expects vectors");
        }
        let mut data = Vec::new();
        for p in parts {
            p.with_data(|a| data.extend_from_slice(a));
        }
        let total = data.len();
        let owned: Vec<Tensor> = parts.to_vec();
        make(vec![total], data, owned.clone(), move |out| {
            out.with_grad(|g| {
                let mut off = 0;
                for p in &owned {
                    let n = p.numel();
                    p.accumulate_grad(&g[off..off + n]);
                    off += n;
                }
            });
        })
    }

    /// Stacks equal-length vectors into a matrix `[n,d]`.
    pub fn stack_rows(rows: &[Tensor]) -> Tensor {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let d = rows[0].numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            assert_eq!(r.shape(), [d], "stack_rows: ragged row shapes");
            r.with_data(|a| data.extend_from_slice(a));
        }
        let n = rows.len();
        let owned: Vec<Tensor> = rows.to_vec();
        make(vec![n, d], data, owned.clone(), move |out| {
            out.with_grad(|g| {
                for (i, r) in owned.iter().enumerate() {
                    r.accumulate_grad(&g[i * d..(i + 1) * d]);
                }
            });
        })
    }

    /// Packs scalars into a vector `[n]`.
    pub fn from_scalars(scalars: &[Tensor]) -> Tensor {
        assert!(!scalars.is_empty(), "from_scalars of nothing");
        let data: Vec<f64> = scalars
            .iter()
            .map(|s| {
                assert_eq!(s.numel(), 1, "from_scalars: non-scalar input");
                s.value()
            })
            .collect();
        let n = data.len();
        let owned: Vec<Tensor> = scalars.to_vec();
        make(vec![n], data, owned.clone(), move |out| {
            out.with_grad(|g| {
                for (i, s) in owned.iter().enumerate() {
                    s.accumulate_grad(&[g[i]]);
                }
            });
        })
    }

    /// Scaled dot-product attention with a single query: softmax over
    /// `scale * (q . k_i)` mixes the value rows. With exactly one key the
    /// weight is exactly 1 and the output equals that value row bitwise.
    pub fn cross_attention(q: &Tensor, keys: &Tensor, values: &Tensor, scale: f64) -> Tensor {
        let d = q.numel();
        assert_eq!(q.shape().len(), 1, "cross_attention: q must be a vector");
        let (n, dk) = mat_dims(keys, "cross_attention keys");
        let (nv, dv) = mat_dims(values, "cross_attention values");
        assert_eq!(dk, d, "cross_attention: key width {dk} vs query width {d}");
        assert_eq!(n, nv, "cross_attention: {n} keys vs {nv} values");
        assert!(n > 0, "cross_attention: empty key set");

        let (w, out_data) = q.with_data(|qv| {
            keys.with_data(|kv| {
                values.with_data(|vv| {
                    let scores: Vec<f64> =
                        (0..n).map(|i| scale * kv[i * d..(i + 1) * d].iter().zip(qv).map(|(a, b)| a * b).sum::<f64>()).collect();
                    let w = raw_softmax(&scores, 1.0);
                    let mut out = vec![0.0; dv];
                    for i in 0..n {
                        for j in 0..dv {
                            out[j] += w[i] * vv[i * dv + j];
                        }
                    }
                    (w, out)
                })
            })
        });
        let (pq, pk, pv) = (q.clone(), keys.clone(), values.clone());
        make(vec![dv], out_data, vec![pq.clone(), pk.clone(), pv.clone()], move |out| {
            out.with_grad(|g| {
                pq.with_data(|qv| {
                    pk.with_data(|kv| {
                        pv.with_data(|vv| {
                            let mut dw = vec![0.0; n];
                            let mut dvals = vec![0.0; n * dv];
                            for i in 0..n {
                                for j in 0..dv {
                                    dw[i] += g[j] * vv[i * dv + j];
                                    dvals[i * dv + j] = g[j] * w[i];
                                }
                            }
                            let ds = raw_softmax_backward(&dw, &w, 1.0);
                            let mut dq = vec![0.0; d];
                            let mut dkeys = vec![0.0; n * d];
                            for i in 0..n {
                                for j in 0..d {
                                    dq[j] += scale * ds[i] * kv[i * d + j];
                                    dkeys[i * d + j] = scale * ds[i] * qv[j];
                                }
                            }
                            pq.accumulate_grad(&dq);
                            pk.accumulate_grad(&dkeys);
                            pv.accumulate_grad(&dvals);
                        })
                    })
                });
            });
        })
    }

    /// KL divergence `KL(p || q)` between probability vectors. `q` is floored
    /// at 1e-12 inside the log; zero-mass `p` entries contribute exactly 0.
    /// Panics if either vector is non-normalized beyond 1e-9 or has negative
    /// entries.
    pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Tensor {
        assert_eq!(p.shape().len(), 1, "kl_divergence: expects vectors");
        assert_same_shape(p, q, "kl_divergence");
        const FLOOR: f64 = 1e-12;
        let check = |t: &Tensor, name: &str| {
            t.with_data(|v| {
                assert!(v.iter().all(|x| *x >= 0.0), "kl_divergence: negative entry in {name}");
                let s: f64 = v.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "kl_divergence: {name} sums to {s}, not normalized");
            });
        };
        check(p, "p");
        check(q, "q");
        let kl = p.with_data(|pv| {
            q.with_data(|qv| {
                pv.iter()
                    .zip(qv)
                    .map(|(pi, qi)| if *pi > 0.0 { pi * (pi.ln() - qi.max(FLOOR).ln()) } else { 0.0 })
                    .sum::<f64>()
            })
        });
        let (pp, pq) = (p.clone(), q.clone());
        make(vec![1], vec![kl], vec![pp.clone(), pq.clone()], move |out| {
            out.with_grad(|g| {
                pp.with_data(|pv| {
                    pq.with_data(|qv| {
                        let mut dp = vec![0.0; pv.len()];
                        let mut dq = vec![0.0; qv.len()];
                        for i in 0..pv.len() {
                            if pv[i] > 0.0 {
                                dp[i] = g[0] * (pv[i].ln() - qv[i].max(FLOOR).ln() + 1.0);
                                if qv[i] > FLOOR {
                                    dq[i] = -g[0] * pv[i] / qv[i];
                                }
                            }
                        }
                        pp.accumulate_grad(&dp);
                        pq.accumulate_grad(&dq);
                    })
                });
            });
        })
    }
}

/// One LSTM cell step built from primitive ops (gate order: input, forget,
/// cell, output). Returns `(h_next, c_next)`.
pub fn lstm_step(x: &Tensor, h: &Tensor, c: &Tensor, w_ih: &Tensor, w_hh: &Tensor, bias: &Tensor) -> (Tensor, Tensor) {
    let hsize = h.numel();
    assert_eq!(c.numel(), hsize, "lstm_step: h/c width mismatch");
    assert_eq!(w_ih.shape()[0], 4 * hsize, "lstm_step: w_ih rows != 4*hidden");
    assert_eq!(w_hh.shape(), [4 * hsize, hsize], "lstm_step: bad w_hh shape");
    assert_eq!(bias.shape(), [4 * hsize], "lstm_step: bad bias shape");
    let gates = w_ih.matvec(x).add(&w_hh.matvec(h)).add(bias);
    let i = gates.slice(0, hsize).sigmoid();
    let f = gates.slice(hsize, 2 * hsize).sigmoid();
    let g = gates.slice(2 * hsize, 3 * hsize).tanh_act();
    let o = gates.slice(3 * hsize, 4 * hsize).sigmoid();
    let c_next = f.mul(c).add(&i.mul(&g));
    let h_next = o.mul(&c_next.tanh_act());
    (h_next, c_next)
}

fn mat_dims(t: &Tensor, what: &str) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "{what}: expects a matrix, got shape {s:?}");
    (s[0], s[1])
}

pub(crate) fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    crow[j] += ail * brow[j];
                }
            }
        }
    }
    c
}

/// `A [m,k] . B^T` where `B` is `[n,k]`.
pub(crate) fn raw_matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `A^T . B` where `A` is `[m,k]` and `B` is `[m,n]`, yielding `[k,n]`.
pub(crate) fn raw_matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != 0.0 {
                let brow = &b[i * n..(i + 1) * n];
                let crow = &mut c[l * n..(l + 1) * n];
                for j in 0..n {
                    crow[j] += ail * brow[j];
                }
            }
        }
    }
    c
}

pub(crate) fn raw_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = logits.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = y.iter().sum();
    for v in &mut y {
        *v /= s;
    }
    y
}

fn raw_softmax_backward(g: &[f64], p: &[f64], tau: f64) -> Vec<f64> {
    let inner: f64 = g.iter().zip(p).map(|(gi, pi)| gi * pi).sum();
    g.iter().zip(p).map(|(gi, pi)| pi * (gi - inner) / tau).collect()
}

#[cfg(test)]
mod tests {
    use super::super::check::fd_gradcheck;
    use super::super::{argmax, no_grad};
    use super::*;
    use crate::rng::SeedStreams;
    use rand::Rng;

    fn randv(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn add_mul_values_and_grads() {
        let a = Tensor::param(&[3], vec![1.0, -2.0, 3.0]);
        let b = Tensor::param(&[3], vec![0.5, 4.0, -1.0]);
        let loss = a.mul(&b).sum();
        assert_eq!(loss.value(), 1.0 * 0.5 + -2.0 * 4.0 + 3.0 * -1.0);
        loss.backward();
        assert_eq!(a.grad(), vec![0.5, 4.0, -1.0]);
        assert_eq!(b.grad(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn square_via_self_mul_accumulates_both_sides() {
        let a = Tensor::param(&[2], vec![3.0, -2.0]);
        let loss = a.mul(&a).sum();
        loss.backward();
        assert_eq!(a.grad(), vec![6.0, -4.0]);
    }

    #[test]
    fn matmul_matches_hand_example() {
        // [DERIVED] 2x2 hand-computed product and gradient.
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::param(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b);
        assert_eq!(c.values(), vec![19.0, 22.0, 43.0, 50.0]);
        let loss = c.sum();
        loss.backward();
        // dC = ones; dA = ones . B^T, dB = A^T . ones
        assert_eq!(a.grad(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_respects_temperature() {
        let l = Tensor::param(&[4], vec![2.0, -1.0, 0.5, 0.0]);
        for tau in [0.25, 0.5, 1.0, 2.0] {
            let p = l.softmax_temperature(tau);
            let s: f64 = p.values().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s} at tau {tau}");
        }
        // Higher temperature flattens: max prob decreases monotonically.
        let sharp = l.softmax_temperature(0.5).values();
        let flat = l.softmax_temperature(2.0).values();
        assert!(sharp[0] > flat[0]);
    }

    #[test]
    #[should_panic(expected = "non-positive temperature")]
    fn softmax_rejects_zero_tau() {
        Tensor::param(&[2], vec![0.0, 1.0]).softmax_temperature(0.0);
    }

    #[test]
    fn single_key_attention_returns_value_exactly() {
        let mut rng = SeedStreams::new(7).stream("t");
        for _ in 0..20 {
            let q = Tensor::param(&[5], randv(&mut rng, 5));
            let k = Tensor::param(&[1, 5], randv(&mut rng, 5));
            let v = Tensor::param(&[1, 5], randv(&mut rng, 5));
            let out = Tensor::cross_attention(&q, &k, &v, 1.0 / (5.0f64).sqrt());
            assert_eq!(out.values(), v.values(), "one key must pass v through bitwise");
        }
    }

    #[test]
    fn two_key_attention_matches_hand_weights() {
        // [DERIVED] scores [1, 0] at scale 1: w = softmax([1,0]).
        let q = Tensor::param(&[2], vec![1.0, 0.0]);
        let k = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let v = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = Tensor::cross_attention(&q, &k, &v, 1.0).values();
        let w0 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((out[0] - w0).abs() < 1e-15);
        assert!((out[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_distributions_is_exactly_zero() {
        let p = Tensor::param(&[3], vec![0.2, 0.5, 0.3]);
        let q = Tensor::constant(&[3], vec![0.2, 0.5, 0.3]);
        assert_eq!(Tensor::kl_divergence(&p, &q).value(), 0.0);
    }

    #[test]
    fn kl_handles_zero_mass_and_floors_q() {
        let p = Tensor::param(&[3], vec![0.0, 1.0, 0.0]);
        let q = Tensor::param(&[3], vec![0.5, 0.5, 0.0]);
        let kl = Tensor::kl_divergence(&p, &q).value();
        assert!((kl - (1.0f64 / 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "not normalized")]
    fn kl_rejects_non_normalized() {
        let p = Tensor::param(&[2], vec![0.7, 0.7]);
        let q = Tensor::param(&[2], vec![0.5, 0.5]);
        Tensor::kl_divergence(&p, &q);
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        // [DERIVED] independent scalar recomputation with hidden size 1.
        let x = Tensor::param(&[1], vec![0.7]);
        let h = Tensor::param(&[1], vec![-0.2]);
        let c = Tensor::param(&[1], vec![0.4]);
        let w_ih = Tensor::param(&[4, 1], vec![0.3, -0.5, 0.8, 0.1]);
        let w_hh = Tensor::param(&[4, 1], vec![-0.4, 0.6, 0.2, -0.7]);
        let b = Tensor::param(&[4], vec![0.05, -0.1, 0.2, 0.0]);
        let (hn, cn) = lstm_step(&x, &h, &c, &w_ih, &w_hh, &b);

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let gi = sig(0.3 * 0.7 + -0.4 * -0.2 + 0.05);
        let gf = sig(-0.5 * 0.7 + 0.6 * -0.2 + -0.1);
        let gg = (0.8 * 0.7 + 0.2 * -0.2 + 0.2f64).tanh();
        let go = sig(0.1 * 0.7 + -0.7 * -0.2 + 0.0);
        let c_expect = gf * 0.4 + gi * gg;
        let h_expect = go * c_expect.tanh();
        assert!((cn.value() - c_expect).abs() < 1e-15);
        assert!((hn.value() - h_expect).abs() < 1e-15);
    }

    #[test]
    fn unreachable_leaf_keeps_bitwise_zero_grad() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]);
        let b = Tensor::param(&[2], vec![3.0, 4.0]);
        let loss = a.sum();
        loss.backward();
        assert!(!b.grad_touched());
        assert_eq!(b.grad(), vec![0.0, 0.0]);
        assert!(b.grad().iter().all(|g| g.to_bits() == 0));
    }

    #[test]
    fn no_grad_produces_constants() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]);
        let out = no_grad(|| a.mul(&a).sum());
        assert!(!out.requires_grad());
        assert_eq!(out.value(), 5.0);
    }

    #[test]
    fn repeated_backward_on_fresh_graphs_accumulates_into_leaves() {
        let a = Tensor::param(&[1], vec![2.0]);
        a.mul(&a).sum().backward();
        a.mul(&a).sum().backward();
        assert_eq!(a.grad(), vec![8.0]); // 4.0 accumulated twice
        a.zero_grad();
        a.mul(&a).sum().backward();
        assert_eq!(a.grad(), vec![4.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn fd_spot_checks_core_ops() {
        let mut rng = SeedStreams::new(42).stream("fd");
        for case in 0..10 {
            let a = Tensor::param(&[3, 4], randv(&mut rng, 12));
            let b = Tensor::param(&[4, 2], randv(&mut rng, 8));
            let err = fd_gradcheck(&[a.clone(), b.clone()], || a.matmul(&b).sum(), 1e-5);
            assert!(err < 1e-4, "matmul case {case}: err {err}");
        }
        for case in 0..10 {
            let l = Tensor::param(&[5], randv(&mut rng, 5));
            let w = Tensor::constant(&[5], {
                let r = randv(&mut rng, 5);
                let s: f64 = r.iter().map(|x| x.exp()).sum();
                r.iter().map(|x| x.exp() / s).collect()
            });
            let err = fd_gradcheck(&[l.clone()], || l.softmax_temperature(0.7).mul(&w).sum(), 1e-5);
            assert!(err < 1e-4, "softmax case {case}: err {err}");
        }
    }
}
