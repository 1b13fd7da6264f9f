//! Trainable modality adapter: per-frame LayerNorm, a strided 1-D
//! convolution stack that subsamples in time, and a per-position projection
//! MLP, with exact analytic forward/backward. Also hosts the similarity head
//! that turns adapted embeddings into CTC logits.

use std::path::Path;

use crate::checkpoint::{Checkpoint, Section, TensorEntry};
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_prime, layer_norm_backward, layer_norm_forward, linear_backward_input,
    linear_backward_params, linear_forward, LayerNormCache,
};
use crate::numerics::{dot, norm, Matrix, Rng};
use crate::param::Param;

pub const SECTION_NAME: &str = "adapter";
const CONFIG_TENSOR: &str = "meta.config";
const DEFAULT_LOGIT_SCALE: f64 = 10.0;

/// Architecture knobs. The conv stack applies `conv_layers` strided layers
/// (first maps `in_dim -> hidden_dim` channels, the rest keep `hidden_dim`),
/// each followed by GELU; output length per layer is
/// `(len - conv_kernel) / conv_stride + 1`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_layers: usize,
    pub mlp_hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            in_dim: 24,
            hidden_dim: 48,
            out_dim: 48,
            conv_kernel: 3,
            conv_stride: 2,
            // One strided layer (2x subsampling). With 2-5 frames per token,
            // a second layer leaves fewer adapted positions than tokens and
            // the warping path is then forced to serve some tokens from
            // mixed-window positions, capping the reachable along-path
            // cosine near 0.72 regardless of capacity.
            conv_layers: 1,
            mlp_hidden: 96,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.in_dim,
            self.hidden_dim,
            self.out_dim,
            self.conv_kernel,
            self.conv_stride,
            self.conv_layers,
            self.mlp_hidden,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "adapter config counts must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Output length after the full conv stack, or `None` when some layer
    /// would produce an empty output.
    pub fn subsampled_len(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for _ in 0..self.conv_layers {
            if len < self.conv_kernel {
                return None;
            }
            len = (len - self.conv_kernel) / self.conv_stride + 1;
        }
        Some(len)
    }

    /// Smallest input length whose subsampled length is >= 1.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1usize;
        for _ in 0..self.conv_layers {
            need = self.conv_kernel + self.conv_stride * (need - 1);
        }
        need
    }

    fn conv_channels(&self, layer: usize) -> (usize, usize) {
        let in_ch = if layer == 0 { self.in_dim } else { self.hidden_dim };
        (in_ch, self.hidden_dim)
    }

    fn to_tensor(&self) -> TensorEntry {
        TensorEntry::vector(
            CONFIG_TENSOR,
            vec![
                self.in_dim as f64,
                self.hidden_dim as f64,
                self.out_dim as f64,
                self.conv_kernel as f64,
                self.conv_stride as f64,
                self.conv_layers as f64,
                self.mlp_hidden as f64,
            ],
        )
    }

    fn from_tensor(t: &TensorEntry) -> Result<AdapterConfig> {
        if t.data.len() != 7 {
            return Err(Error::Checkpoint(format!(
                "adapter {CONFIG_TENSOR}: expected 7 fields, found {}",
                t.data.len()
            )));
        }
        let cfg = AdapterConfig {
            in_dim: t.data[0] as usize,
            hidden_dim: t.data[1] as usize,
            out_dim: t.data[2] as usize,
            conv_kernel: t.data[3] as usize,
            conv_stride: t.data[4] as usize,
            conv_layers: t.data[5] as usize,
            mlp_hidden: t.data[6] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All trainable adapter parameters with paired gradient storage. The blank
/// vector and logit scale belong to the CTC similarity head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    config: AdapterConfig,
    ln_gain: Param,
    ln_bias: Param,
    conv_w: Vec<Param>,
    conv_b: Vec<Param>,
    mlp_w1: Param,
    mlp_b1: Param,
    mlp_w2: Param,
    mlp_b2: Param,
    blank_vector: Param,
    logit_scale: Param,
}

fn xavier(rng: &mut Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform(-a, a)).collect()
}

/// Seeded initialization: conv and affine weights uniform in
/// `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`, LayerNorm gain 1 and
/// bias 0, zero biases, logit scale 10.
pub fn adapter_init(config: &AdapterConfig, rng: &Rng) -> Result<AdapterParams> {
    config.validate()?;
    let c = config.clone();
    let mut conv_w = Vec::with_capacity(c.conv_layers);
    let mut conv_b = Vec::with_capacity(c.conv_layers);
    for l in 0..c.conv_layers {
        let (in_ch, out_ch) = c.conv_channels(l);
        let fan_in = in_ch * c.conv_kernel;
        let fan_out = out_ch * c.conv_kernel;
        let mut wrng = rng.split(&format!("conv{l}.w"));
        conv_w.push(Param::new(
            &format!("conv{l}.w"),
            vec![out_ch, in_ch, c.conv_kernel],
            xavier(&mut wrng, out_ch * in_ch * c.conv_kernel, fan_in, fan_out),
        ));
        conv_b.push(Param::zeros(&format!("conv{l}.b"), vec![out_ch]));
    }
    let mut w1_rng = rng.split("mlp.w1");
    let mut w2_rng = rng.split("mlp.w2");
    let mut blank_rng = rng.split("ctc.blank");
    Ok(AdapterParams {
        ln_gain: Param::new("ln.gain", vec![c.in_dim], vec![1.0; c.in_dim]),
        ln_bias: Param::zeros("ln.bias", vec![c.in_dim]),
        mlp_w1: Param::new(
            "mlp.w1",
            vec![c.mlp_hidden, c.hidden_dim],
            xavier(&mut w1_rng, c.mlp_hidden * c.hidden_dim, c.hidden_dim, c.mlp_hidden),
        ),
        mlp_b1: Param::zeros("mlp.b1", vec![c.mlp_hidden]),
        mlp_w2: Param::new(
            "mlp.w2",
            vec![c.out_dim, c.mlp_hidden],
            xavier(&mut w2_rng, c.out_dim * c.mlp_hidden, c.mlp_hidden, c.out_dim),
        ),
        mlp_b2: Param::zeros("mlp.b2", vec![c.out_dim]),
        blank_vector: Param::new(
            "ctc.blank",
            vec![c.out_dim],
            xavier(&mut blank_rng, c.out_dim, c.out_dim, 1),
        ),
        logit_scale: Param::scalar("ctc.scale", DEFAULT_LOGIT_SCALE),
        conv_w,
        conv_b,
        config: c,
    })
}

impl AdapterParams {
    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale.value[0]
    }

    /// All parameters in a fixed order (the checkpoint and optimizer order).
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.ln_gain, &self.ln_bias];
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.blank_vector,
            &self.logit_scale,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = vec![&mut self.ln_gain, &mut self.ln_bias];
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.blank_vector,
            &mut self.logit_scale,
        ]);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params_mut() {
            for g in &mut p.grad {
                *g *= factor;
            }
        }
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(SECTION_NAME);
        s.push(self.config.to_tensor());
        for p in self.params() {
            s.push(TensorEntry::new(&p.name, p.shape.clone(), p.value.clone()));
        }
        s
    }

    pub fn from_section(section: &Section) -> Result<AdapterParams> {
        let cfg_tensor = section.get(CONFIG_TENSOR).ok_or_else(|| {
            Error::Checkpoint(format!("missing {CONFIG_TENSOR} in adapter section"))
        })?;
        let config = AdapterConfig::from_tensor(cfg_tensor)?;
        // Start from a zero-initialized skeleton with the right shapes, then
        // fill every tensor from the section, validating shapes.
        let mut params = adapter_init(&config, &Rng::new(0))?;
        for p in params.params_mut() {
            let t = section.expect(&p.name, &p.shape)?;
            p.value.clone_from(&t.data);
            p.zero_grad();
        }
        Ok(params)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            sections: vec![self.to_section()],
        };
        ck.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<AdapterParams> {
        let ck = Checkpoint::load(path)?;
        AdapterParams::from_section(ck.section(SECTION_NAME)?)
    }
}

/// Cached activations of one forward pass; consumed by the backward pass
/// (moving it in makes reuse impossible).
pub struct AdapterTape {
    input_len: usize,
    ln_cache: LayerNormCache,
    conv_inputs: Vec<Matrix>,
    conv_pre: Vec<Matrix>,
    mlp_in: Matrix,
    mlp_pre: Matrix,
    mlp_hidden_act: Matrix,
}

/// LayerNorm per frame, strided conv stack with GELU, then a per-position
/// two-layer MLP. Returns the adapted embeddings `H` (I x out_dim).
pub fn adapter_forward(
    params: &AdapterParams,
    speech: &Matrix,
) -> Result<(Matrix, AdapterTape)> {
    let c = &params.config;
    if speech.cols() != c.in_dim {
        return Err(Error::ShapeMismatch {
            context: "adapter_forward".into(),
            expected: format!("T x {}", c.in_dim),
            found: format!("{}x{}", speech.rows(), speech.cols()),
        });
    }
    if c.subsampled_len(speech.rows()).is_none() {
        return Err(Error::InputTooShort {
            len: speech.rows(),
            min: c.min_input_len(),
        });
    }

    let (ln_out, ln_cache) = layer_norm_forward(speech, &params.ln_gain.value, &params.ln_bias.value);

    let mut conv_inputs = Vec::with_capacity(c.conv_layers);
    let mut conv_pre = Vec::with_capacity(c.conv_layers);
    let mut x = ln_out;
    for l in 0..c.conv_layers {
        let (in_ch, out_ch) = c.conv_channels(l);
        let out_len = (x.rows() - c.conv_kernel) / c.conv_stride + 1;
        let w = &params.conv_w[l].value;
        let b = &params.conv_b[l].value;
        let mut z = Matrix::zeros(out_len, out_ch);
        for t in 0..out_len {
            let base = t * c.conv_stride;
            let zr = z.row_mut(t);
            for (oc, zv) in zr.iter_mut().enumerate() {
                let mut acc = b[oc];
                for k in 0..c.conv_kernel {
                    let xr = x.row(base + k);
                    let wrow = &w[(oc * in_ch) * c.conv_kernel..];
                    for (ic, &xv) in xr.iter().enumerate() {
                        acc += wrow[ic * c.conv_kernel + k] * xv;
                    }
                }
                *zv = acc;
            }
        }
        let mut a = Matrix::zeros(out_len, out_ch);
        for (av, &zv) in a.data_mut().iter_mut().zip(z.data()) {
            *av = gelu(zv);
        }
        conv_inputs.push(x);
        conv_pre.push(z);
        x = a;
    }

    let mlp_in = x;
    let mlp_pre = linear_forward(
        &mlp_in,
        &params.mlp_w1.value,
        Some(&params.mlp_b1.value),
        c.mlp_hidden,
    );
    let mut hidden_act = Matrix::zeros(mlp_pre.rows(), mlp_pre.cols());
    for (av, &zv) in hidden_act.data_mut().iter_mut().zip(mlp_pre.data()) {
        *av = gelu(zv);
    }
    let h = linear_forward(
        &hidden_act,
        &params.mlp_w2.value,
        Some(&params.mlp_b2.value),
        c.out_dim,
    );
    debug_assert!(h.all_finite());

    Ok((
        h,
        AdapterTape {
            input_len: speech.rows(),
            ln_cache,
            conv_inputs,
            conv_pre,
            mlp_in,
            mlp_pre,
            mlp_hidden_act: hidden_act,
        },
    ))
}

/// Exact reverse-mode of [`adapter_forward`]. Parameter gradients
/// ACCUMULATE into the paired `grad` buffers (the caller zeroes them);
/// returns the gradient with respect to the input frames.
pub fn adapter_backward(
    params: &mut AdapterParams,
    tape: AdapterTape,
    grad_h: &Matrix,
) -> Result<Matrix> {
    let c = params.config.clone();
    let i_len = tape.mlp_in.rows();
    if grad_h.rows() != i_len || grad_h.cols() != c.out_dim {
        return Err(Error::ShapeMismatch {
            context: "adapter_backward".into(),
            expected: format!("{}x{}", i_len, c.out_dim),
            found: format!("{}x{}", grad_h.rows(), grad_h.cols()),
        });
    }

    // MLP second layer.
    linear_backward_params(
        grad_h,
        &tape.mlp_hidden_act,
        &mut params.mlp_w2.grad,
        Some(&mut params.mlp_b2.grad),
    );
    let dhidden = linear_backward_input(grad_h, &params.mlp_w2.value, c.mlp_hidden);
    // GELU between the MLP layers.
    let mut dpre = dhidden;
    for (g, &z) in dpre.data_mut().iter_mut().zip(tape.mlp_pre.data()) {
        *g *= gelu_prime(z);
    }
    // MLP first layer.
    linear_backward_params(
        &dpre,
        &tape.mlp_in,
        &mut params.mlp_w1.grad,
        Some(&mut params.mlp_b1.grad),
    );
    let mut dx = linear_backward_input(&dpre, &params.mlp_w1.value, c.hidden_dim);

    // Conv stack, reversed.
    for l in (0..c.conv_layers).rev() {
        let (in_ch, _out_ch) = c.conv_channels(l);
        let z = &tape.conv_pre[l];
        let input = &tape.conv_inputs[l];
        let mut dz = dx;
        for (g, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
            *g *= gelu_prime(zv);
        }
        let Param {
            value: w, grad: dw, ..
        } = &mut params.conv_w[l];
        let w = &*w;
        let db = &mut params.conv_b[l].grad;
        let mut dinput = Matrix::zeros(input.rows(), in_ch);
        for t in 0..dz.rows() {
            let base = t * c.conv_stride;
            let dzr = dz.row(t);
            for (oc, &g) in dzr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                for k in 0..c.conv_kernel {
                    let xr = input.row(base + k);
                    let row_off = (oc * in_ch) * c.conv_kernel;
                    let din = dinput.row_mut(base + k);
                    for ic in 0..in_ch {
                        let idx = row_off + ic * c.conv_kernel + k;
                        dw[idx] += g * xr[ic];
                        din[ic] += g * w[idx];
                    }
                }
            }
        }
        dx = dinput;
    }

    debug_assert_eq!(dx.rows(), tape.input_len);
    let grad_speech = layer_norm_backward(
        &dx,
        &params.ln_gain.value,
        &tape.ln_cache,
        Some(&mut params.ln_gain.grad),
        Some(&mut params.ln_bias.grad),
    );
    Ok(grad_speech)
}

/// Forward cache for the CTC similarity head.
pub struct CtcHeadTape {
    h: Matrix,
}

/// Scaled-cosine logits of each adapted embedding against the vocabulary
/// embedding rows, with a trailing blank column scored against the learned
/// blank vector: output is `I x (V + 1)` and the blank id is `V`.
pub fn ctc_logits(
    params: &AdapterParams,
    h: &Matrix,
    embed_table: &Matrix,
) -> Result<(Matrix, CtcHeadTape)> {
    let d = params.config.out_dim;
    if h.cols() != d || embed_table.cols() != d {
        return Err(Error::ShapeMismatch {
            context: "ctc_logits".into(),
            expected: format!("embedding dim {d}"),
            found: format!("H {}x{}, table {}x{}", h.rows(), h.cols(), embed_table.rows(), embed_table.cols()),
        });
    }
    let eps = crate::numerics::NORM_EPSILON;
    let scale = params.logit_scale.value[0];
    let v = embed_table.rows();
    let blank = &params.blank_vector.value;
    let blank_norm = norm(blank).max(eps);
    let table_norms: Vec<f64> = (0..v).map(|k| norm(embed_table.row(k)).max(eps)).collect();

    let mut logits = Matrix::zeros(h.rows(), v + 1);
    for i in 0..h.rows() {
        let hr = h.row(i);
        let hn = norm(hr).max(eps);
        let row = logits.row_mut(i);
        for k in 0..v {
            row[k] = scale * dot(hr, embed_table.row(k)) / (hn * table_norms[k]);
        }
        row[v] = scale * dot(hr, blank) / (hn * blank_norm);
    }
    Ok((logits, CtcHeadTape { h: h.clone() }))
}

/// Reverse-mode of [`ctc_logits`]: accumulates into the logit scale and the
/// blank vector, returns the gradient with respect to `H`. The embedding
/// table is frozen and receives no gradient.
pub fn ctc_logits_backward(
    params: &mut AdapterParams,
    tape: &CtcHeadTape,
    grad_logits: &Matrix,
    embed_table: &Matrix,
) -> Result<Matrix> {
    let h = &tape.h;
    let v = embed_table.rows();
    if grad_logits.rows() != h.rows() || grad_logits.cols() != v + 1 {
        return Err(Error::ShapeMismatch {
            context: "ctc_logits_backward".into(),
            expected: format!("{}x{}", h.rows(), v + 1),
            found: format!("{}x{}", grad_logits.rows(), grad_logits.cols()),
        });
    }
    let eps = crate::numerics::NORM_EPSILON;
    let scale = params.logit_scale.value[0];
    let blank = params.blank_vector.value.clone();
    let mut grad_h = Matrix::zeros(h.rows(), h.cols());
    let mut dscale = 0.0;
    for i in 0..h.rows() {
        let hr = h.row(i);
        let gr = grad_logits.row(i);
        let gh = grad_h.row_mut(i);
        for k in 0..v {
            let g = gr[k];
            if g == 0.0 {
                continue;
            }
            let e = embed_table.row(k);
            let cos = dot(hr, e) / (norm(hr).max(eps) * norm(e).max(eps));
            dscale += g * cos;
            // d cos / d h = -cosine_distance_grad.
            let dcos = crate::numerics::cosine_distance_grad(hr, e, eps);
            for (ghv, &dv) in gh.iter_mut().zip(&dcos) {
                *ghv -= g * scale * dv;
            }
        }
        let g = gr[v];
        if g != 0.0 {
            let cos = dot(hr, &blank) / (norm(hr).max(eps) * norm(&blank).max(eps));
            dscale += g * cos;
            let dcos_h = crate::numerics::cosine_distance_grad(hr, &blank, eps);
            for (ghv, &dv) in gh.iter_mut().zip(&dcos_h) {
                *ghv -= g * scale * dv;
            }
            // Symmetric formula for the blank side.
            let dcos_b = crate::numerics::cosine_distance_grad(&blank, hr, eps);
            for (bg, &dv) in params.blank_vector.grad.iter_mut().zip(&dcos_b) {
                *bg -= g * scale * dv;
            }
        }
    }
    params.logit_scale.grad[0] += dscale;
    Ok(grad_h)
}
