use rand::Rng;

use super::layers::{avg_pool2, avg_pool2_backward, upsample2, upsample2_backward, Conv};
use super::loss::{loss_grad, LossParts};
use super::{NetworkSpec, TrainConfig};
use crate::color::{LinearImage, CHANNELS};
use crate::error::{invalid, Result};
use crate::kernel::{
    apply_kernels, apply_kernels_weight_grad, regulation_penalty, regulation_penalty_grad,
    KernelField,
};
use crate::rng::{stage_rng, Stage};

/// Record of every branch decision taken while evaluating the loss: ReLU
/// signs, sRGB branches, L1 signs and penalty signs. Two evaluations
/// with equal traces lie on the same smooth piece of the loss.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KinkTrace {
    bits: Vec<u64>,
    len: usize,
}

impl KinkTrace {
    pub fn push(&mut self, b: bool) {
        if self.len % 64 == 0 {
            self.bits.push(0);
        }
        if b {
            *self.bits.last_mut().unwrap() |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub(crate) fn extend_signs(&mut self, values: &[f64]) {
        for v in values {
            self.push(*v > 0.0);
            self.push(*v == 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Encoder-decoder with skip connections predicting a K×K kernel bank per
/// pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    head: Conv,
    params: Vec<f64>,
}

pub(crate) struct Cache {
    input: Vec<f64>,
    enc_in: Vec<Vec<f64>>,
    enc_out: Vec<Vec<f64>>,
    dec_in: Vec<Vec<f64>>,
    dec_out: Vec<Vec<f64>>,
    pub field: KernelField,
}

fn layout(spec: &NetworkSpec) -> (Vec<Conv>, Vec<Conv>, Conv, usize) {
    let widths = &spec.encoder_widths;
    let n = widths.len();
    let mut offset = 0;
    let mut next = |cin, cout, k| {
        let c = Conv {
            cin,
            cout,
            k,
            offset,
        };
        offset += c.param_count();
        c
    };
    let mut enc = Vec::with_capacity(n);
    let mut cin = CHANNELS;
    for &w in widths {
        enc.push(next(cin, w, 3));
        cin = w;
    }
    // Decoder stage s works at the resolution of encoder stage s.
    let mut dec = vec![
        Conv {
            cin: 0,
            cout: 0,
            k: 3,
            offset: 0
        };
        n
    ];
    for s in (0..n).rev() {
        let up = widths[(s + 1).min(n - 1)];
        dec[s] = next(up + widths[s], widths[s], 3);
    }
    let head = next(widths[0], spec.output_channels(), 1);
    (enc, dec, head, offset)
}

fn relu_in_place(x: &mut [f64], trace: &mut Option<&mut KinkTrace>) {
    if let Some(t) = trace.as_deref_mut() {
        t.extend_signs(x);
    }
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(d: &mut [f64], out: &[f64]) {
    for (g, o) in d.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

impl Network {
    /// Fan-in-scaled uniform weights drawn from `spec.seed`; zero biases.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let mut rng = stage_rng(net.spec.seed, Stage::Init);
        let layers: Vec<Conv> = net
            .enc
            .iter()
            .chain(net.dec.iter().rev())
            .chain([&net.head])
            .copied()
            .collect();
        for c in layers {
            let bound = (6.0 / c.fan_in() as f64).sqrt();
            for p in &mut net.params[c.offset..c.offset + c.weight_count()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let (enc, dec, head, count) = layout(&spec);
        Ok(Self {
            spec,
            enc,
            dec,
            head,
            params: vec![0.0; count],
        })
    }

    /// All weights zero and head biases set to the identity kernel bank, so
    /// every input maps to the identity field.
    pub fn identity(spec: NetworkSpec) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let k = net.spec.kernel_order;
        let kk = k * k;
        let centre = kk / 2;
        let bias = net.head.offset + net.head.weight_count();
        for c in 0..CHANNELS {
            net.params[bias + (c * CHANNELS + c) * kk + centre] = 1.0;
        }
        Ok(net)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        if params.len() != net.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, input: &LinearImage) -> Result<KernelField> {
        Ok(self.forward_cached(input, None)?.field)
    }

    pub(crate) fn forward_cached(
        &self,
        input: &LinearImage,
        mut trace: Option<&mut KinkTrace>,
    ) -> Result<Cache> {
        let s0 = self.spec.input_size;
        if input.height() != s0 || input.width() != s0 {
            return Err(invalid(format!(
                "network expects {s0}x{s0} input, got {}x{}",
                input.height(),
                input.width()
            )));
        }
        let n = self.enc.len();
        let hw = s0 * s0;
        let mut planar = vec![0.0; CHANNELS * hw];
        for (p, px) in input.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                planar[c * hw + p] = px[c];
            }
        }
        let mut enc_in = Vec::with_capacity(n);
        let mut enc_out = Vec::with_capacity(n);
        let mut x = planar.clone();
        let mut size = s0;
        for conv in &self.enc {
            let mut a = conv.forward(&self.params, &x, size, size);
            relu_in_place(&mut a, &mut trace);
            let pooled = avg_pool2(&a, conv.cout, size, size);
            enc_in.push(std::mem::replace(&mut x, pooled));
            enc_out.push(a);
            size /= 2;
        }
        let mut dec_in = vec![Vec::new(); n];
        let mut dec_out = vec![Vec::new(); n];
        let mut cur = x;
        for s in (0..n).rev() {
            let conv = &self.dec[s];
            let up_c = conv.cin - self.enc[s].cout;
            let mut cat = upsample2(&cur, up_c, size, size);
            size *= 2;
            cat.extend_from_slice(&enc_out[s]);
            let mut a = conv.forward(&self.params, &cat, size, size);
            relu_in_place(&mut a, &mut trace);
            dec_in[s] = cat;
            cur = a.clone();
            dec_out[s] = a;
        }
        let head = self.head.forward(&self.params, &cur, s0, s0);
        let per_px = self.spec.output_channels();
        let mut weights = vec![0.0; hw * per_px];
        for ch in 0..per_px {
            for p in 0..hw {
                weights[p * per_px + ch] = head[ch * hw + p];
            }
        }
        let field = KernelField::new(s0, s0, self.spec.kernel_order, weights)?;
        Ok(Cache {
            input: planar,
            enc_in,
            enc_out,
            dec_in,
            dec_out,
            field,
        })
    }

    /// Accumulates into `grad` the parameter gradient given the gradient of
    /// the loss with respect to the field weights.
    pub(crate) fn backward(&self, cache: &Cache, d_field: &[f64], grad: &mut [f64]) {
        let s0 = self.spec.input_size;
        let hw = s0 * s0;
        let per_px = self.spec.output_channels();
        let mut d_head = vec![0.0; per_px * hw];
        for p in 0..hw {
            for ch in 0..per_px {
                d_head[ch * hw + p] = d_field[p * per_px + ch];
            }
        }
        let n = self.enc.len();
        let mut d_cur = self
            .head
            .backward(&self.params, &cache.dec_out[0], s0, s0, &d_head, grad, true)
            .expect("input gradient requested");
        let mut d_skip: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut size = s0;
        for s in 0..n {
            let conv = &self.dec[s];
            relu_backward(&mut d_cur, &cache.dec_out[s]);
            let d_cat = conv
                .backward(
                    &self.params,
                    &cache.dec_in[s],
                    size,
                    size,
                    &d_cur,
                    grad,
                    true,
                )
                .expect("input gradient requested");
            let up_c = conv.cin - self.enc[s].cout;
            let (d_up, skip) = d_cat.split_at(up_c * size * size);
            d_skip.push(skip.to_vec());
            size /= 2;
            d_cur = upsample2_backward(d_up, up_c, size, size);
        }
        for s in (0..n).rev() {
            let conv = &self.enc[s];
            size *= 2;
            let mut d_a = avg_pool2_backward(&d_cur, conv.cout, size, size);
            for (a, b) in d_a.iter_mut().zip(&d_skip[s]) {
                *a += b;
            }
            relu_backward(&mut d_a, &cache.enc_out[s]);
            let x = if s == 0 {
                &cache.input
            } else {
                &cache.enc_in[s]
            };
            if let Some(dx) = conv.backward(&self.params, x, size, size, &d_a, grad, s > 0) {
                d_cur = dx;
            }
        }
    }

    /// Total loss of one sample; accumulates `scale · ∂L/∂θ` into `grad`.
    pub fn accumulate_gradient(
        &self,
        input: &LinearImage,
        target: &LinearImage,
        config: &TrainConfig,
        scale: f64,
        grad: &mut [f64],
        mut trace: Option<&mut KinkTrace>,
    ) -> Result<LossParts> {
        let cache = self.forward_cached(input, trace.as_deref_mut())?;
        let (parts, d_field) = field_loss_grad(input, target, &cache.field, config, trace)?;
        let d_field: Vec<f64> = d_field.into_iter().map(|g| g * scale).collect();
        self.backward(&cache, &d_field, grad);
        Ok(parts)
    }

    /// Loss only (no gradient).
    pub fn loss(
        &self,
        input: &LinearImage,
        target: &LinearImage,
        config: &TrainConfig,
    ) -> Result<LossParts> {
        let field = self.forward(input)?;
        super::loss::total_loss(input, target, &field, config)
    }
}

/// Loss of a field against the target and its gradient with respect to
/// every field weight.
pub(crate) fn field_loss_grad(
    input: &LinearImage,
    target: &LinearImage,
    field: &KernelField,
    config: &TrainConfig,
    mut trace: Option<&mut KinkTrace>,
) -> Result<(LossParts, Vec<f64>)> {
    let pred = apply_kernels(input, field)?;
    let (h, w) = (input.height(), input.width());
    let (l1, l2, d_pred) = loss_grad(
        pred.data(),
        target.data(),
        h,
        w,
        config,
        trace.as_deref_mut(),
    )?;
    let n = (h * w) as f64;
    let penalty = regulation_penalty(field) / n;
    let mut d_field = apply_kernels_weight_grad(input, field.kernel_order(), &d_pred);
    if config.lambda3 != 0.0 {
        let pg = regulation_penalty_grad(field);
        for (d, s) in d_field.iter_mut().zip(pg) {
            *d += config.lambda3 / n * s;
        }
    }
    if let Some(t) = trace {
        t.extend_signs(field.weights());
    }
    let total = config.lambda1 * l1 + config.lambda2 * l2 + config.lambda3 * penalty;
    Ok((
        LossParts {
            l1,
            l2,
            penalty,
            total,
        },
        d_field,
    ))
}
