//! Tape-based reverse-mode automatic differentiation over whole-tensor ops.
//!
//! A `Tape` records one forward computation as a linear sequence of steps;
//! `backward` replays the steps in reverse, accumulating gradients of a
//! scalar loss into every node. Node creation order is a topological order
//! of the graph, so the reverse sweep visits each step exactly once.
//!
//! The op set is exactly what the probing front-end and the three mapper
//! networks need: dense affine layers, relu/sigmoid, batch normalization,
//! the two classification losses, and the complex-pair ops (conjugate
//! matvec, unit-modulus normalization, phase parameterization, |·|²,
//! row-wise conjugate dot).

use super::tensor::{mm_nn_acc, mm_nt_acc, mm_tn_acc, NumericsError, Tensor};

/// Probability clamp for binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;
/// Modulus floor under which unit normalization refuses to divide.
pub const MODULUS_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Step {
    Matmul {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    AddRow {
        x: NodeId,
        bias: NodeId,
        out: NodeId,
    },
    Relu {
        x: NodeId,
        out: NodeId,
    },
    Sigmoid {
        x: NodeId,
        out: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        out: NodeId,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        out: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        out: NodeId,
        labels: Vec<usize>,
        softmax: Tensor,
    },
    BinaryCrossEntropy {
        probs: NodeId,
        out: NodeId,
        targets: Tensor,
    },
    CplxMatvec {
        w_re: NodeId,
        w_im: NodeId,
        h_re: NodeId,
        h_im: NodeId,
        out_re: NodeId,
        out_im: NodeId,
    },
    CplxUnitNormalize {
        re: NodeId,
        im: NodeId,
        out_re: NodeId,
        out_im: NodeId,
        scale: f64,
    },
    PhaseParam {
        phi: NodeId,
        out_re: NodeId,
        out_im: NodeId,
        scale: f64,
    },
    AbsSquared {
        re: NodeId,
        im: NodeId,
        out: NodeId,
    },
    DbShift {
        x: NodeId,
        out: NodeId,
        floor: f64,
    },
    Standardize {
        x: NodeId,
        out: NodeId,
        inv_std: Vec<f64>,
    },
    Scale {
        x: NodeId,
        out: NodeId,
        c: f64,
    },
    AddConst {
        x: NodeId,
        out: NodeId,
    },
    RowwiseCplxDot {
        a_re: NodeId,
        a_im: NodeId,
        out_re: NodeId,
        out_im: NodeId,
        b_re: Tensor,
        b_im: Tensor,
    },
    MeanAll {
        x: NodeId,
        out: NodeId,
    },
}

/// One forward computation and, after `backward`, its gradients.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    steps: Vec<Step>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor) -> NodeId {
        self.values.push(value);
        NodeId(self.values.len() - 1)
    }

    /// Registers an input or parameter value. Gradients accumulate into
    /// every leaf; whether they are consumed is the caller's business.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `out = a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::DimMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let n = sb[1];
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nn_acc(
            m,
            k,
            n,
            self.values[a.0].data(),
            self.values[b.0].data(),
            out.data_mut(),
        );
        let out = self.push(out);
        self.steps.push(Step::Matmul { a, b, out });
        Ok(out)
    }

    /// Broadcast add of a rank-1 bias over the rows of `x: [B×d]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (sx, sb) = (self.values[x.0].shape(), self.values[bias.0].shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(NumericsError::DimMismatch {
                op: "add_row",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = self.values[x.0].clone();
        let b = self.values[bias.0].data().to_vec();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let out = self.push(out);
        self.steps.push(Step::AddRow { x, bias, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let out = self.push(out);
        self.steps.push(Step::Relu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = if *v >= 0.0 {
                1.0 / (1.0 + (-*v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
        }
        let out = self.push(out);
        self.steps.push(Step::Sigmoid { x, out });
        out
    }

    /// Batch normalization in training mode: per-feature batch statistics.
    /// Returns the output node plus the biased batch mean and variance so
    /// the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>), NumericsError> {
        let sx = self.values[x.0].shape().to_vec();
        if sx.len() != 2 {
            return Err(NumericsError::BadRank {
                op: "batchnorm_train",
                expected: 2,
                shape: sx,
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        if rows < 2 {
            return Err(NumericsError::BatchTooSmall { got: rows });
        }
        let xd = self.values[x.0].data();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += xd[r * cols + c];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = xd[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            for c in 0..cols {
                x_hat.data_mut()[r * cols + c] = (xd[r * cols + c] - mean[c]) * inv_std[c];
            }
        }
        let g = self.values[gamma.0].data().to_vec();
        let b = self.values[beta.0].data().to_vec();
        let mut out = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] = g[c] * x_hat.data()[r * cols + c] + b[c];
            }
        }
        let out = self.push(out);
        self.steps.push(Step::BatchNormTrain {
            x,
            gamma,
            beta,
            out,
            x_hat,
            inv_std,
        });
        Ok((out, mean, var))
    }

    /// Batch normalization in inference mode, using frozen running stats.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let sx = self.values[x.0].shape().to_vec();
        if sx.len() != 2 || sx[1] != running_mean.len() || sx[1] != running_var.len() {
            return Err(NumericsError::DimMismatch {
                op: "batchnorm_eval",
                left: sx,
                right: vec![running_mean.len()],
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.values[gamma.0].data().to_vec();
        let b = self.values[beta.0].data().to_vec();
        let xd = self.values[x.0].data();
        let mut out = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] =
                    g[c] * (xd[r * cols + c] - running_mean[c]) * inv_std[c] + b[c];
            }
        }
        let out = self.push(out);
        self.steps.push(Step::BatchNormEval {
            x,
            gamma,
            beta,
            out,
            mean: running_mean.to_vec(),
            inv_std,
        });
        Ok(out)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, max-subtracted.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let s = self.values[logits.0].shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(NumericsError::DimMismatch {
                op: "softmax_cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        for &l in labels {
            if l >= cols {
                return Err(NumericsError::LabelOutOfRange {
                    label: l,
                    classes: cols,
                });
            }
        }
        let xd = self.values[logits.0].data();
        let mut softmax = Tensor::zeros(vec![rows, cols]);
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                softmax.data_mut()[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                softmax.data_mut()[r * cols + c] /= denom;
            }
            loss += denom.ln() - (row[labels[r]] - max);
        }
        loss /= rows as f64;
        let out = self.push(Tensor::scalar(loss));
        self.steps.push(Step::SoftmaxCrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            softmax,
        });
        Ok(out)
    }

    /// Mean over all entries of `−[y ln p + (1−y) ln(1−p)]` with `p`
    /// clamped to `[BCE_CLAMP, 1−BCE_CLAMP]`.
    pub fn binary_cross_entropy(
        &mut self,
        probs: NodeId,
        targets: Tensor,
    ) -> Result<NodeId, NumericsError> {
        let s = self.values[probs.0].shape();
        if s != targets.shape() {
            return Err(NumericsError::DimMismatch {
                op: "binary_cross_entropy",
                left: s.to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let pd = self.values[probs.0].data();
        let mut loss = 0.0;
        for (p, y) in pd.iter().zip(targets.data()) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        loss /= pd.len() as f64;
        let out = self.push(Tensor::scalar(loss));
        self.steps.push(Step::BinaryCrossEntropy {
            probs,
            out,
            targets,
        });
        Ok(out)
    }

    /// `y = Wᴴh` row-wise over the batch: `w_re/w_im: [N×K]`,
    /// `h_re/h_im: [B×N]` produce `[B×K]` real and imaginary parts.
    pub fn cplx_matvec(
        &mut self,
        w_re: NodeId,
        w_im: NodeId,
        h_re: NodeId,
        h_im: NodeId,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let sw = self.values[w_re.0].shape().to_vec();
        let sh = self.values[h_re.0].shape().to_vec();
        if sw.len() != 2
            || sh.len() != 2
            || sw != self.values[w_im.0].shape()
            || sh != self.values[h_im.0].shape()
            || sw[0] != sh[1]
        {
            return Err(NumericsError::DimMismatch {
                op: "cplx_matvec",
                left: sw,
                right: sh,
            });
        }
        let (n, k) = (sw[0], sw[1]);
        let batch = sh[0];
        let wre = self.values[w_re.0].data();
        let wim = self.values[w_im.0].data();
        let hre = self.values[h_re.0].data();
        let him = self.values[h_im.0].data();
        // y_re = h_re·W_re + h_im·W_im ; y_im = h_im·W_re − h_re·W_im
        let mut yre = Tensor::zeros(vec![batch, k]);
        let mut yim = Tensor::zeros(vec![batch, k]);
        mm_nn_acc(batch, n, k, hre, wre, yre.data_mut());
        mm_nn_acc(batch, n, k, him, wim, yre.data_mut());
        mm_nn_acc(batch, n, k, him, wre, yim.data_mut());
        {
            let mut tmp = vec![0.0; batch * k];
            mm_nn_acc(batch, n, k, hre, wim, &mut tmp);
            for (o, t) in yim.data_mut().iter_mut().zip(&tmp) {
                *o -= t;
            }
        }
        let out_re = self.push(yre);
        let out_im = self.push(yim);
        self.steps.push(Step::CplxMatvec {
            w_re,
            w_im,
            h_re,
            h_im,
            out_re,
            out_im,
        });
        Ok((out_re, out_im))
    }

    /// Per-entry `θ/|θ| · 1/√n_antennas`, differentiable in both parts.
    pub fn cplx_unit_normalize(
        &mut self,
        re: NodeId,
        im: NodeId,
        n_antennas: usize,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        if self.values[re.0].shape() != self.values[im.0].shape() {
            return Err(NumericsError::DimMismatch {
                op: "cplx_unit_normalize",
                left: self.values[re.0].shape().to_vec(),
                right: self.values[im.0].shape().to_vec(),
            });
        }
        let scale = 1.0 / (n_antennas as f64).sqrt();
        let rd = self.values[re.0].data();
        let id = self.values[im.0].data();
        let mut ore = Tensor::zeros(self.values[re.0].shape().to_vec());
        let mut oim = Tensor::zeros(self.values[im.0].shape().to_vec());
        for i in 0..rd.len() {
            let r = rd[i].hypot(id[i]);
            if r < MODULUS_FLOOR {
                return Err(NumericsError::ModulusUnderflow {
                    index: i,
                    modulus: r,
                    floor: MODULUS_FLOOR,
                });
            }
            ore.data_mut()[i] = scale * rd[i] / r;
            oim.data_mut()[i] = scale * id[i] / r;
        }
        let out_re = self.push(ore);
        let out_im = self.push(oim);
        self.steps.push(Step::CplxUnitNormalize {
            re,
            im,
            out_re,
            out_im,
            scale,
        });
        Ok((out_re, out_im))
    }

    /// `(cos φ / √n, sin φ / √n)` — the phase parameterization of a
    /// unit-modulus beam entry.
    pub fn phase_parameterize(&mut self, phi: NodeId, n_antennas: usize) -> (NodeId, NodeId) {
        let scale = 1.0 / (n_antennas as f64).sqrt();
        let pd = self.values[phi.0].data();
        let mut ore = Tensor::zeros(self.values[phi.0].shape().to_vec());
        let mut oim = Tensor::zeros(self.values[phi.0].shape().to_vec());
        for i in 0..pd.len() {
            ore.data_mut()[i] = scale * pd[i].cos();
            oim.data_mut()[i] = scale * pd[i].sin();
        }
        let out_re = self.push(ore);
        let out_im = self.push(oim);
        self.steps.push(Step::PhaseParam {
            phi,
            out_re,
            out_im,
            scale,
        });
        (out_re, out_im)
    }

    /// Elementwise `re² + im²`.
    pub fn abs_squared(&mut self, re: NodeId, im: NodeId) -> Result<NodeId, NumericsError> {
        if self.values[re.0].shape() != self.values[im.0].shape() {
            return Err(NumericsError::DimMismatch {
                op: "abs_squared",
                left: self.values[re.0].shape().to_vec(),
                right: self.values[im.0].shape().to_vec(),
            });
        }
        let rd = self.values[re.0].data();
        let id = self.values[im.0].data();
        let mut out = Tensor::zeros(self.values[re.0].shape().to_vec());
        for i in 0..rd.len() {
            out.data_mut()[i] = rd[i] * rd[i] + id[i] * id[i];
        }
        let out = self.push(out);
        self.steps.push(Step::AbsSquared { re, im, out });
        Ok(out)
    }

    /// `10·log10(x + floor)` elementwise; `floor > 0` keeps it finite at 0.
    pub fn db_shift(&mut self, x: NodeId, floor: f64) -> NodeId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = 10.0 * (*v + floor).log10();
        }
        let out = self.push(out);
        self.steps.push(Step::DbShift { x, out, floor });
        out
    }

    /// Per-column `(x − mean)·inv_std` with constant statistics.
    pub fn standardize(
        &mut self,
        x: NodeId,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Result<NodeId, NumericsError> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 2 || s[1] != mean.len() || s[1] != inv_std.len() {
            return Err(NumericsError::DimMismatch {
                op: "standardize",
                left: s,
                right: vec![mean.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = self.values[x.0].clone();
        for r in 0..rows {
            for c in 0..cols {
                let v = &mut out.data_mut()[r * cols + c];
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let out = self.push(out);
        self.steps.push(Step::Standardize {
            x,
            out,
            inv_std: inv_std.to_vec(),
        });
        Ok(out)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let out = self.push(out);
        self.steps.push(Step::Scale { x, out, c });
        out
    }

    /// Add a constant tensor (gradient passes through unchanged).
    pub fn add_const(&mut self, x: NodeId, t: &Tensor) -> Result<NodeId, NumericsError> {
        if self.values[x.0].shape() != t.shape() {
            return Err(NumericsError::DimMismatch {
                op: "add_const",
                left: self.values[x.0].shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let mut out = self.values[x.0].clone();
        for (v, a) in out.data_mut().iter_mut().zip(t.data()) {
            *v += a;
        }
        let out = self.push(out);
        self.steps.push(Step::AddConst { x, out });
        Ok(out)
    }

    /// Row-wise conjugate dot against a constant complex matrix:
    /// `d[b] = Σ_n conj(a[b,n])·c[b,n]` for `a, c: [B×N]`; returns the
    /// real and imaginary parts as rank-1 `[B]` nodes.
    pub fn rowwise_cplx_dot(
        &mut self,
        a_re: NodeId,
        a_im: NodeId,
        b_re: Tensor,
        b_im: Tensor,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let s = self.values[a_re.0].shape().to_vec();
        if s.len() != 2
            || s != self.values[a_im.0].shape()
            || s != b_re.shape()
            || s != b_im.shape()
        {
            return Err(NumericsError::DimMismatch {
                op: "rowwise_cplx_dot",
                left: s,
                right: b_re.shape().to_vec(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let are = self.values[a_re.0].data();
        let aim = self.values[a_im.0].data();
        let mut dre = Tensor::zeros(vec![rows]);
        let mut dim = Tensor::zeros(vec![rows]);
        for r in 0..rows {
            let (mut sre, mut sim) = (0.0, 0.0);
            for c in 0..cols {
                let i = r * cols + c;
                sre += are[i] * b_re.data()[i] + aim[i] * b_im.data()[i];
                sim += are[i] * b_im.data()[i] - aim[i] * b_re.data()[i];
            }
            dre.data_mut()[r] = sre;
            dim.data_mut()[r] = sim;
        }
        let out_re = self.push(dre);
        let out_im = self.push(dim);
        self.steps.push(Step::RowwiseCplxDot {
            a_re,
            a_im,
            out_re,
            out_im,
            b_re,
            b_im,
        });
        Ok((out_re, out_im))
    }

    /// Mean over all entries, to a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let d = self.values[x.0].data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let out = self.push(Tensor::scalar(mean));
        self.steps.push(Step::MeanAll { x, out });
        out
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` for every node, sweeping the recorded
    /// steps in reverse topological order exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.values[loss.0].numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        self.grads = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape().to_vec()))
            .collect();
        self.grads[loss.0].data_mut()[0] = 1.0;

        for si in (0..self.steps.len()).rev() {
            // Split-borrow dance: take the step out, put it back after.
            let step = &self.steps[si];
            match step {
                Step::Matmul { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    let (m, k) = self.values[a.0].dims2();
                    let n = self.values[b.0].dims2().1;
                    let g = std::mem::replace(&mut self.grads[out.0], Tensor::zeros(vec![0]));
                    {
                        let bv = self.values[b.0].clone();
                        mm_nt_acc(m, n, k, g.data(), bv.data(), self.grads[a.0].data_mut());
                    }
                    {
                        let av = self.values[a.0].clone();
                        mm_tn_acc(k, m, n, av.data(), g.data(), self.grads[b.0].data_mut());
                    }
                    self.grads[out.0] = g;
                }
                Step::AddRow { x, bias, out } => {
                    let (x, bias, out) = (*x, *bias, *out);
                    let (rows, cols) = (self.values[x.0].dims2().0, self.values[x.0].dims2().1);
                    let g = self.grads[out.0].clone();
                    for (gx, gv) in self.grads[x.0].data_mut().iter_mut().zip(g.data()) {
                        *gx += gv;
                    }
                    for r in 0..rows {
                        for c in 0..cols {
                            self.grads[bias.0].data_mut()[c] += g.data()[r * cols + c];
                        }
                    }
                }
                Step::Relu { x, out } => {
                    let (x, out) = (*x, *out);
                    let g = self.grads[out.0].clone();
                    let xv = self.values[x.0].clone();
                    for i in 0..g.numel() {
                        if xv.data()[i] > 0.0 {
                            self.grads[x.0].data_mut()[i] += g.data()[i];
                        }
                    }
                }
                Step::Sigmoid { x, out } => {
                    let (x, out) = (*x, *out);
                    let g = self.grads[out.0].clone();
                    let s = self.values[out.0].clone();
                    for i in 0..g.numel() {
                        let sv = s.data()[i];
                        self.grads[x.0].data_mut()[i] += g.data()[i] * sv * (1.0 - sv);
                    }
                }
                Step::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    out,
                    x_hat,
                    inv_std,
                } => {
                    let (x, gamma, beta, out) = (*x, *gamma, *beta, *out);
                    let x_hat = x_hat.clone();
                    let inv_std = inv_std.clone();
                    let g = self.grads[out.0].clone();
                    let (rows, cols) = x_hat.dims2();
                    let gv = self.values[gamma.0].clone();
                    let bf = rows as f64;
                    let mut g_mean = vec![0.0; cols];
                    let mut gx_hat_mean = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            g_mean[c] += g.data()[i];
                            gx_hat_mean[c] += g.data()[i] * x_hat.data()[i];
                        }
                    }
                    for c in 0..cols {
                        self.grads[gamma.0].data_mut()[c] += gx_hat_mean[c];
                        self.grads[beta.0].data_mut()[c] += g_mean[c];
                        g_mean[c] /= bf;
                        gx_hat_mean[c] /= bf;
                    }
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            self.grads[x.0].data_mut()[i] += gv.data()[c]
                                * inv_std[c]
                                * (g.data()[i] - g_mean[c] - x_hat.data()[i] * gx_hat_mean[c]);
                        }
                    }
                }
                Step::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    out,
                    mean,
                    inv_std,
                } => {
                    let (x, gamma, beta, out) = (*x, *gamma, *beta, *out);
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let g = self.grads[out.0].clone();
                    let (rows, cols) = self.values[x.0].dims2();
                    let gv = self.values[gamma.0].clone();
                    let xv = self.values[x.0].clone();
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            self.grads[x.0].data_mut()[i] += g.data()[i] * gv.data()[c] * inv_std[c];
                            self.grads[gamma.0].data_mut()[c] +=
                                g.data()[i] * (xv.data()[i] - mean[c]) * inv_std[c];
                            self.grads[beta.0].data_mut()[c] += g.data()[i];
                        }
                    }
                }
                Step::SoftmaxCrossEntropy {
                    logits,
                    out,
                    labels,
                    softmax,
                } => {
                    let (logits, out) = (*logits, *out);
                    let labels = labels.clone();
                    let softmax = softmax.clone();
                    let g = self.grads[out.0].item();
                    let (rows, cols) = softmax.dims2();
                    let inv_b = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let mut d = softmax.data()[r * cols + c];
                            if c == labels[r] {
                                d -= 1.0;
                            }
                            self.grads[logits.0].data_mut()[r * cols + c] += g * d * inv_b;
                        }
                    }
                }
                Step::BinaryCrossEntropy { probs, out, targets } => {
                    let (probs, out) = (*probs, *out);
                    let targets = targets.clone();
                    let g = self.grads[out.0].item();
                    let pv = self.values[probs.0].clone();
                    let inv_n = 1.0 / pv.numel() as f64;
                    for i in 0..pv.numel() {
                        let p = pv.data()[i];
                        // Clamp is flat outside its band: zero gradient there.
                        if p >= BCE_CLAMP && p <= 1.0 - BCE_CLAMP {
                            let y = targets.data()[i];
                            self.grads[probs.0].data_mut()[i] +=
                                g * inv_n * (p - y) / (p * (1.0 - p));
                        }
                    }
                }
                Step::CplxMatvec {
                    w_re,
                    w_im,
                    h_re,
                    h_im,
                    out_re,
                    out_im,
                } => {
                    let (w_re, w_im, h_re, h_im) = (*w_re, *w_im, *h_re, *h_im);
                    let (out_re, out_im) = (*out_re, *out_im);
                    let g_re = self.grads[out_re.0].clone();
                    let g_im = self.grads[out_im.0].clone();
                    let (n, k) = self.values[w_re.0].dims2();
                    let batch = self.values[h_re.0].dims2().0;
                    let hre = self.values[h_re.0].clone();
                    let him = self.values[h_im.0].clone();
                    let wre = self.values[w_re.0].clone();
                    let wim = self.values[w_im.0].clone();
                    let sub = |dst: &mut [f64], src: &[f64]| {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d -= s;
                        }
                    };
                    // gW_re += h_reᵀ·g_re + h_imᵀ·g_im
                    mm_tn_acc(n, batch, k, hre.data(), g_re.data(), self.grads[w_re.0].data_mut());
                    mm_tn_acc(n, batch, k, him.data(), g_im.data(), self.grads[w_re.0].data_mut());
                    // gW_im += h_imᵀ·g_re − h_reᵀ·g_im
                    mm_tn_acc(n, batch, k, him.data(), g_re.data(), self.grads[w_im.0].data_mut());
                    let mut tmp_w = vec![0.0; n * k];
                    mm_tn_acc(n, batch, k, hre.data(), g_im.data(), &mut tmp_w);
                    sub(self.grads[w_im.0].data_mut(), &tmp_w);
                    // gh_re += g_re·W_reᵀ − g_im·W_imᵀ
                    mm_nt_acc(batch, k, n, g_re.data(), wre.data(), self.grads[h_re.0].data_mut());
                    let mut tmp_h = vec![0.0; batch * n];
                    mm_nt_acc(batch, k, n, g_im.data(), wim.data(), &mut tmp_h);
                    sub(self.grads[h_re.0].data_mut(), &tmp_h);
                    // gh_im += g_re·W_imᵀ + g_im·W_reᵀ
                    mm_nt_acc(batch, k, n, g_re.data(), wim.data(), self.grads[h_im.0].data_mut());
                    mm_nt_acc(batch, k, n, g_im.data(), wre.data(), self.grads[h_im.0].data_mut());
                }
                Step::CplxUnitNormalize {
                    re,
                    im,
                    out_re,
                    out_im,
                    scale,
                } => {
                    let (re, im, out_re, out_im, scale) = (*re, *im, *out_re, *out_im, *scale);
                    let g_re = self.grads[out_re.0].clone();
                    let g_im = self.grads[out_im.0].clone();
                    let rv = self.values[re.0].clone();
                    let iv = self.values[im.0].clone();
                    for i in 0..rv.numel() {
                        let (x, y) = (rv.data()[i], iv.data()[i]);
                        let r = x.hypot(y);
                        let u = scale / (r * r * r);
                        self.grads[re.0].data_mut()[i] +=
                            u * (g_re.data()[i] * y * y - g_im.data()[i] * x * y);
                        self.grads[im.0].data_mut()[i] +=
                            u * (-g_re.data()[i] * x * y + g_im.data()[i] * x * x);
                    }
                }
                Step::PhaseParam {
                    phi,
                    out_re,
                    out_im,
                    scale,
                } => {
                    let (phi, out_re, out_im, scale) = (*phi, *out_re, *out_im, *scale);
                    let g_re = self.grads[out_re.0].clone();
                    let g_im = self.grads[out_im.0].clone();
                    let pv = self.values[phi.0].clone();
                    for i in 0..pv.numel() {
                        let p = pv.data()[i];
                        self.grads[phi.0].data_mut()[i] +=
                            scale * (-p.sin() * g_re.data()[i] + p.cos() * g_im.data()[i]);
                    }
                }
                Step::AbsSquared { re, im, out } => {
                    let (re, im, out) = (*re, *im, *out);
                    let g = self.grads[out.0].clone();
                    let rv = self.values[re.0].clone();
                    let iv = self.values[im.0].clone();
                    for i in 0..g.numel() {
                        self.grads[re.0].data_mut()[i] += 2.0 * rv.data()[i] * g.data()[i];
                        self.grads[im.0].data_mut()[i] += 2.0 * iv.data()[i] * g.data()[i];
                    }
                }
                Step::DbShift { x, out, floor } => {
                    let (x, out, floor) = (*x, *out, *floor);
                    let g = self.grads[out.0].clone();
                    let xv = self.values[x.0].clone();
                    let c = 10.0 / std::f64::consts::LN_10;
                    for i in 0..g.numel() {
                        self.grads[x.0].data_mut()[i] += g.data()[i] * c / (xv.data()[i] + floor);
                    }
                }
                Step::Standardize { x, out, inv_std } => {
                    let (x, out) = (*x, *out);
                    let inv_std = inv_std.clone();
                    let g = self.grads[out.0].clone();
                    let cols = inv_std.len();
                    for i in 0..g.numel() {
                        self.grads[x.0].data_mut()[i] += g.data()[i] * inv_std[i % cols];
                    }
                }
                Step::Scale { x, out, c } => {
                    let (x, out, c) = (*x, *out, *c);
                    let g = self.grads[out.0].clone();
                    for i in 0..g.numel() {
                        self.grads[x.0].data_mut()[i] += c * g.data()[i];
                    }
                }
                Step::AddConst { x, out } => {
                    let (x, out) = (*x, *out);
                    let g = self.grads[out.0].clone();
                    for i in 0..g.numel() {
                        self.grads[x.0].data_mut()[i] += g.data()[i];
                    }
                }
                Step::RowwiseCplxDot {
                    a_re,
                    a_im,
                    out_re,
                    out_im,
                    b_re,
                    b_im,
                } => {
                    let (a_re, a_im, out_re, out_im) = (*a_re, *a_im, *out_re, *out_im);
                    let b_re = b_re.clone();
                    let b_im = b_im.clone();
                    let g_re = self.grads[out_re.0].clone();
                    let g_im = self.grads[out_im.0].clone();
                    let (rows, cols) = self.values[a_re.0].dims2();
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            self.grads[a_re.0].data_mut()[i] +=
                                g_re.data()[r] * b_re.data()[i] + g_im.data()[r] * b_im.data()[i];
                            self.grads[a_im.0].data_mut()[i] +=
                                g_re.data()[r] * b_im.data()[i] - g_im.data()[r] * b_re.data()[i];
                        }
                    }
                }
                Step::MeanAll { x, out } => {
                    let (x, out) = (*x, *out);
                    let g = self.grads[out.0].item();
                    let n = self.values[x.0].numel() as f64;
                    for gx in self.grads[x.0].data_mut() {
                        *gx += g / n;
                    }
                }
            }
        }
        Ok(())
    }
}
