// SPDX-License-Identifier: Apache-2.0

//! Forward/backward through a chain of networks, where only the first
//! segment standardizes its input.

use crate::nnet::{BatchTrace, DenseNetwork, Gradients};

pub(crate) fn forward(nets: &[&DenseNetwork], x_std: &[f64], rows: usize) -> Vec<BatchTrace> {
    let mut traces: Vec<BatchTrace> = Vec::with_capacity(nets.len());
    for (i, net) in nets.iter().enumerate() {
        let trace = if i == 0 {
            net.forward_batch_std(x_std, rows)
        } else {
            net.forward_batch_std(traces[i - 1].output(), rows)
        };
        traces.push(trace);
    }
    traces
}

/// Gradients for every segment given `d_out` at the end of the chain.
pub(crate) fn backward(nets: &[&DenseNetwork], traces: &[BatchTrace], d_out: &[f64]) -> Vec<Gradients> {
    let mut grads = Vec::with_capacity(nets.len());
    let mut delta = d_out.to_vec();
    for i in (0..nets.len()).rev() {
        let (g, d_in) = nets[i].backward_batch(&traces[i], &delta, i > 0);
        grads.push(g);
        if let Some(d) = d_in {
            delta = d;
        }
    }
    grads.reverse();
    grads
}

/// Chain output for raw rows.
pub(crate) fn predict(nets: &[&DenseNetwork], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let x = nets[0].standardize_rows(chunk);
        let traces = forward(nets, &x, chunk.len());
        let last = nets.last().unwrap();
        out.extend(traces.last().unwrap().output().chunks(last.output_dim).map(|r| r[0]));
    }
    out
}

/// Output of the full chain for raw rows, all output dimensions.
pub(crate) fn embed(nets: &[&DenseNetwork], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let x = nets[0].standardize_rows(chunk);
        let traces = forward(nets, &x, chunk.len());
        let d = nets.last().unwrap().output_dim;
        out.extend(traces.last().unwrap().output().chunks(d).map(<[f64]>::to_vec));
    }
    out
}
