//! Hand-rolled forward and reverse passes for the layer list.
//!
//! The reverse pass seeds `softmax(z) − onehot(y)` per example, so the
//! input gradients that come out are per-example own-loss gradients;
//! parameter gradients are accumulated over the batch and divided by `n`
//! at the end to match the batch-mean loss. Loop order is fixed, which
//! makes every result bit-deterministic.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::nn::{per_example_losses, Layer, ModelSpec, ModelState};

pub(crate) struct Backprop {
    pub logits: DenseArray,
    pub per_example_loss: Vec<f64>,
    /// Row `i` = gradient of example `i`'s own loss w.r.t. its pixels.
    pub input_grads: DenseArray,
    /// Gradients of the batch-mean loss, one per parameter tensor.
    pub param_grads: Vec<DenseArray>,
}

fn check_input(spec: &ModelSpec, images: &DenseArray) -> Result<()> {
    if images.row_shape() != spec.input_shape {
        return Err(Error::config(format!(
            "batch row shape {:?} does not match model input shape {:?}",
            images.row_shape(),
            spec.input_shape
        )));
    }
    Ok(())
}

/// Forward pass over the whole batch; returns logits `[n, n_classes]`.
pub(crate) fn forward(spec: &ModelSpec, state: &ModelState, images: &DenseArray) -> Result<DenseArray> {
    check_input(spec, images)?;
    let mut cur = images.clone();
    let mut param_ix = 0;
    for layer in &spec.layers {
        cur = layer_forward(layer, &cur, state, &mut param_ix)?;
    }
    Ok(cur)
}

/// Fused forward + reverse pass.
pub(crate) fn backprop(
    spec: &ModelSpec,
    state: &ModelState,
    images: &DenseArray,
    labels: &[usize],
) -> Result<Backprop> {
    check_input(spec, images)?;
    if images.rows() != labels.len() {
        return Err(Error::input(format!(
            "{} labels for {} images",
            labels.len(),
            images.rows()
        )));
    }
    let n = images.rows();
    if n == 0 {
        return Err(Error::input("backward pass over an empty batch".into()));
    }

    // Forward, caching each layer's input.
    let mut inputs: Vec<DenseArray> = Vec::with_capacity(spec.layers.len());
    let mut cur = images.clone();
    let mut param_ix = 0;
    for layer in &spec.layers {
        let next = layer_forward(layer, &cur, state, &mut param_ix)?;
        inputs.push(cur);
        cur = next;
    }
    let logits = cur;
    let per_example_loss = per_example_losses(&logits, labels)?;

    // Loss seed: softmax(z) - onehot(y), per example.
    let k = spec.n_classes;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        let z = logits.row(i);
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        for j in 0..k {
            grad[i * k + j] = (z[j] - m).exp() / denom;
        }
        grad[i * k + labels[i]] -= 1.0;
    }
    let mut grad = DenseArray::new(vec![n, k], grad)?;

    // Reverse sweep; parameter gradients accumulate the batch sum.
    let mut param_grads: Vec<DenseArray> = spec
        .param_shapes()
        .into_iter()
        .map(DenseArray::zeros)
        .collect::<Result<Vec<_>>>()?;
    let mut param_ix = state.params.len();
    for (layer, input) in spec.layers.iter().zip(&inputs).rev() {
        grad = layer_backward(layer, input, &grad, state, &mut param_ix, &mut param_grads)?;
    }

    // Batch sum -> batch mean.
    let inv_n = 1.0 / n as f64;
    for g in &mut param_grads {
        for v in g.data_mut() {
            *v *= inv_n;
        }
    }

    Ok(Backprop { logits, per_example_loss, input_grads: grad, param_grads })
}

fn layer_forward(
    layer: &Layer,
    input: &DenseArray,
    state: &ModelState,
    param_ix: &mut usize,
) -> Result<DenseArray> {
    let n = input.rows();
    match *layer {
        Layer::Dense { in_dim, out_dim } => {
            let w = &state.params[*param_ix];
            let b = &state.params[*param_ix + 1];
            *param_ix += 2;
            let (wd, bd) = (w.data(), b.data());
            let mut out = vec![0.0; n * out_dim];
            for i in 0..n {
                let x = input.row(i);
                let y = &mut out[i * out_dim..(i + 1) * out_dim];
                for o in 0..out_dim {
                    let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                    let mut acc = bd[o];
                    for k in 0..in_dim {
                        acc += wrow[k] * x[k];
                    }
                    y[o] = acc;
                }
            }
            DenseArray::new(vec![n, out_dim], out)
        }
        Layer::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
            let w = &state.params[*param_ix];
            let b = &state.params[*param_ix + 1];
            *param_ix += 2;
            let [_, h, iw] = input.row_shape()[..] else {
                return Err(Error::config("conv2d input must be [c, h, w]".into()));
            };
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (iw + 2 * pad - kernel) / stride + 1;
            let (wd, bd) = (w.data(), b.data());
            let mut out = vec![0.0; n * out_ch * oh * ow];
            for i in 0..n {
                let x = input.row(i);
                let y = &mut out[i * out_ch * oh * ow..(i + 1) * out_ch * oh * ow];
                for oc in 0..out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bd[oc];
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        acc += wd[((oc * in_ch + ic) * kernel + ky) * kernel + kx]
                                            * x[(ic * h + iy as usize) * iw + ix as usize];
                                    }
                                }
                            }
                            y[(oc * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            DenseArray::new(vec![n, out_ch, oh, ow], out)
        }
        Layer::Relu => input.map(|v| v.max(0.0)),
        Layer::Flatten => {
            let flat = input.row_len();
            input.clone().reshape(vec![n, flat])
        }
    }
}

fn layer_backward(
    layer: &Layer,
    input: &DenseArray,
    grad_out: &DenseArray,
    state: &ModelState,
    param_ix: &mut usize,
    param_grads: &mut [DenseArray],
) -> Result<DenseArray> {
    let n = input.rows();
    match *layer {
        Layer::Dense { in_dim, out_dim } => {
            *param_ix -= 2;
            let w = state.params[*param_ix].data();
            let mut dx = vec![0.0; n * in_dim];
            {
                let (dw_arr, db_arr) = {
                    let (a, b) = param_grads.split_at_mut(*param_ix + 1);
                    (&mut a[*param_ix], &mut b[0])
                };
                let dw = dw_arr.data_mut();
                let db = db_arr.data_mut();
                for i in 0..n {
                    let x = input.row(i);
                    let dy = grad_out.row(i);
                    let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
                    for o in 0..out_dim {
                        let g = dy[o];
                        db[o] += g;
                        let wrow = &w[o * in_dim..(o + 1) * in_dim];
                        let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                        for k in 0..in_dim {
                            dwrow[k] += g * x[k];
                            dxi[k] += g * wrow[k];
                        }
                    }
                }
            }
            DenseArray::new(vec![n, in_dim], dx)
        }
        Layer::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
            *param_ix -= 2;
            let w = state.params[*param_ix].data();
            let [_, h, iw] = input.row_shape()[..] else {
                return Err(Error::config("conv2d input must be [c, h, w]".into()));
            };
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (iw + 2 * pad - kernel) / stride + 1;
            let mut dx = vec![0.0; n * in_ch * h * iw];
            {
                let (dw_arr, db_arr) = {
                    let (a, b) = param_grads.split_at_mut(*param_ix + 1);
                    (&mut a[*param_ix], &mut b[0])
                };
                let dw = dw_arr.data_mut();
                let db = db_arr.data_mut();
                for i in 0..n {
                    let x = input.row(i);
                    let dy = grad_out.row(i);
                    let dxi = &mut dx[i * in_ch * h * iw..(i + 1) * in_ch * h * iw];
                    for oc in 0..out_ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dy[(oc * oh + oy) * ow + ox];
                                db[oc] += g;
                                for ic in 0..in_ch {
                                    for ky in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kernel {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= iw as isize {
                                                continue;
                                            }
                                            let wi = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                                            let xi = (ic * h + iy as usize) * iw + ix as usize;
                                            dw[wi] += g * x[xi];
                                            dxi[xi] += g * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            DenseArray::new(vec![n, in_ch, h, iw], dx)
        }
        Layer::Relu => input.zip_with(grad_out, |x, g| if x > 0.0 { g } else { 0.0 }),
        Layer::Flatten => grad_out.clone().reshape(input.shape().to_vec()),
    }
}
