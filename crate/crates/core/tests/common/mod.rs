//! Tape-free loop implementations of the cell stages, used as oracles.
#![allow(dead_code)]

pub mod checks;

use modernn::modecell::{Conv, DsConv, FusionMode, Gate, LinearLayer, ModeCellParams, GATES};
use modernn::params::ParamStore;
use modernn::tensor::Tensor;

/// Plain `[B, C, H, W]` array.
#[derive(Clone, Debug)]
pub struct Map {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            b,
            c,
            h,
            w,
            v: vec![0.0; b * c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            b: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().to_vec(),
        }
    }

    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, x: f64) {
        let (cc, h, w) = (self.c, self.h, self.w);
        self.v[((b * cc + c) * h + i) * w + j] = x;
    }

    pub fn max_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(t.shape(), [self.b, self.c, self.h, self.w]);
        self.v
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!(self.v.len(), o.v.len());
        Map {
            v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(),
            ..*self
        }
    }

    fn apply(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            v: self.v.iter().map(|a| f(*a)).collect(),
            ..*self
        }
    }

    fn channels(&self, start: usize, len: usize) -> Map {
        let mut out = Map::zeros(self.b, len, self.h, self.w);
        for b in 0..self.b {
            for c in 0..len {
                for i in 0..self.h {
                    for j in 0..self.w {
                        out.set(b, c, i, j, self.at(b, start + c, i, j));
                    }
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-padded "same" convolution, written out as nested loops.
pub fn conv(x: &Map, w: &Tensor, bias: Option<&Tensor>) -> Map {
    let s = w.shape();
    let (cout, cin, kh, kw) = (s[0], s[1], s[2], s[3]);
    assert_eq!(cin, x.c);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = Map::zeros(x.b, cout, x.h, x.w);
    for b in 0..x.b {
        for co in 0..cout {
            for i in 0..x.h {
                for j in 0..x.w {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..cin {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let si = i as isize + di as isize - ph;
                                let sj = j as isize + dj as isize - pw;
                                if si >= 0 && sj >= 0 && (si as usize) < x.h && (sj as usize) < x.w
                                {
                                    acc += w.data()[((co * cin + ci) * kh + di) * kw + dj]
                                        * x.at(b, ci, si as usize, sj as usize);
                                }
                            }
                        }
                    }
                    out.set(b, co, i, j, acc);
                }
            }
        }
    }
    out
}

pub fn depthwise(x: &Map, w: &Tensor) -> Map {
    let k = w.shape()[2];
    let p = k as isize / 2;
    let mut out = Map::zeros(x.b, x.c, x.h, x.w);
    for b in 0..x.b {
        for c in 0..x.c {
            for i in 0..x.h {
                for j in 0..x.w {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            let si = i as isize + di as isize - p;
                            let sj = j as isize + dj as isize - p;
                            if si >= 0 && sj >= 0 && (si as usize) < x.h && (sj as usize) < x.w {
                                acc += w.data()[(c * k + di) * k + dj]
                                    * x.at(b, c, si as usize, sj as usize);
                            }
                        }
                    }
                    out.set(b, c, i, j, acc);
                }
            }
        }
    }
    out
}

fn conv_p(store: &ParamStore, c: &Conv, x: &Map) -> Map {
    conv(x, store.get(c.weight), c.bias.map(|b| store.get(b)))
}

fn ds_conv(store: &ParamStore, d: &DsConv, x: &Map) -> Map {
    let y = depthwise(x, store.get(d.depthwise));
    conv(&y, store.get(d.pointwise), Some(store.get(d.bias)))
}

/// `[B, din]` → `[B, dout]`.
fn linear(store: &ParamStore, l: &LinearLayer, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.get(l.weight);
    let bias = store.get(l.bias);
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    bias.data()[o]
                        + (0..din)
                            .map(|i| w.data()[o * din + i] * row[i])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn gap(x: &Map) -> Vec<Vec<f64>> {
    (0..x.b)
        .map(|b| {
            (0..x.c)
                .map(|c| {
                    let mut s = 0.0;
                    for i in 0..x.h {
                        for j in 0..x.w {
                            s += x.at(b, c, i, j);
                        }
                    }
                    s / (x.h * x.w) as f64
                })
                .collect()
        })
        .collect()
}

pub struct OracleBind {
    pub slots: Vec<Map>,
    pub input: Map,
    /// `attention[b][n][p][q]`.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn bind_slots(
    params: &ModeCellParams,
    store: &ParamStore,
    bus: &Map,
    x: &Map,
    h_prev: &Map,
) -> OracleBind {
    let cfg = &params.config;
    let (n, dh) = (cfg.num_slots, cfg.d_head());
    let c = cfg.channels();
    let mut input = Map::zeros(x.b, c, x.h, x.w);
    for b in 0..x.b {
        for ch in 0..c {
            for i in 0..x.h {
                for j in 0..x.w {
                    let v = if ch < x.c {
                        x.at(b, ch, i, j)
                    } else {
                        h_prev.at(b, ch - x.c, i, j)
                    };
                    input.set(b, ch, i, j, v);
                }
            }
        }
    }
    let proj = |p: &modernn::modecell::Projection, m: &Map| {
        ds_conv(store, &p.stages[1], &ds_conv(store, &p.stages[0], m))
    };
    let q = proj(&params.query, bus);
    let k = proj(&params.key, &input);
    let v = proj(&params.value, &input);
    let hw = x.h * x.w;
    let pos = |p: usize| (p / x.w, p % x.w);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attended = Map::zeros(x.b, c, x.h, x.w);
    let mut attention = Vec::new();
    for b in 0..x.b {
        let mut per_head = Vec::new();
        for head in 0..n {
            let mut rows = Vec::new();
            for p in 0..hw {
                let (pi, pj) = pos(p);
                let scores: Vec<f64> = (0..hw)
                    .map(|r| {
                        let (ri, rj) = pos(r);
                        (0..dh)
                            .map(|d| {
                                q.at(b, head * dh + d, pi, pj) * k.at(b, head * dh + d, ri, rj)
                            })
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let a: Vec<f64> = e.iter().map(|v| v / z).collect();
                for d in 0..dh {
                    let mut acc = 0.0;
                    for (r, ar) in a.iter().enumerate() {
                        let (ri, rj) = pos(r);
                        acc += ar * v.at(b, head * dh + d, ri, rj);
                    }
                    attended.set(b, head * dh + d, pi, pj, acc);
                }
                rows.push(a);
            }
            per_head.push(rows);
        }
        attention.push(per_head);
    }
    let slots = (0..n)
        .map(|s| {
            let raw = attended.channels(s * dh, dh);
            let f = &params.ffn_bind[s];
            let y = conv_p(store, &f.first, &raw).apply(|v| v.max(0.0));
            conv_p(store, &f.second, &y)
        })
        .collect();
    OracleBind {
        slots,
        input,
        attention,
    }
}

/// `omega[gate][slot][b][c]`; empty under equal fusion.
pub fn importance_weights(
    params: &ModeCellParams,
    store: &ParamStore,
    input: &Map,
) -> Vec<Vec<Vec<Vec<f64>>>> {
    let Some(reduce) = &params.ffn_fuse_reduce else {
        return Vec::new();
    };
    let r: Vec<Vec<f64>> = linear(store, reduce, &gap(input))
        .into_iter()
        .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    params
        .gates
        .iter()
        .map(|g| g.ffn_fuse.iter().map(|l| linear(store, l, &r)).collect())
        .collect()
}

pub fn adaptive_fuse(
    params: &ModeCellParams,
    store: &ParamStore,
    gate: Gate,
    input: &Map,
    slots: &[Map],
    omega: &[Vec<Vec<Vec<f64>>>],
) -> Map {
    let gp = params.gate(gate);
    let residual = conv_p(store, &gp.w_fuse[0], input);
    let mut out = input.apply(sigmoid).zip(&residual, |a, b| a * b);
    for (n, slot) in slots.iter().enumerate() {
        let proj = conv_p(store, &gp.w_fuse[n + 1], slot);
        for b in 0..input.b {
            for c in 0..input.c {
                let weight = |i, j| match params.config.fusion {
                    FusionMode::Adaptive => {
                        sigmoid(omega[gate as usize][n][b][c] * input.at(b, c, i, j))
                    }
                    FusionMode::Equal => 0.5,
                };
                for i in 0..input.h {
                    for j in 0..input.w {
                        let cur = out.at(b, c, i, j);
                        out.set(b, c, i, j, cur + weight(i, j) * proj.at(b, c, i, j));
                    }
                }
            }
        }
    }
    out
}

/// `(bus, hidden)`.
pub fn gate_and_transition(
    params: &ModeCellParams,
    store: &ParamStore,
    fused: &[Map; 4],
    input: &Map,
    bus_prev: &Map,
) -> (Map, Map) {
    let pre: Vec<Map> = GATES
        .iter()
        .map(|&g| {
            let gp = params.gate(g);
            conv_p(store, &gp.w_f, &fused[g as usize])
                .zip(&conv_p(store, &gp.w_i, input), |a, b| a + b)
        })
        .collect();
    let i = pre[Gate::Input as usize].apply(sigmoid);
    let f = pre[Gate::Forget as usize].apply(sigmoid);
    let o = pre[Gate::Output as usize].apply(sigmoid);
    let g = pre[Gate::Modulation as usize].apply(f64::tanh);
    let mut bus = Map::zeros(bus_prev.b, bus_prev.c, bus_prev.h, bus_prev.w);
    for idx in 0..bus.v.len() {
        bus.v[idx] = f.v[idx] * bus_prev.v[idx] + i.v[idx] * g.v[idx];
    }
    let squashed = conv(&bus, store.get(params.out_proj), None).apply(f64::tanh);
    let hidden = o.zip(&squashed, |a, b| a * b);
    (bus, hidden)
}

pub struct OracleStep {
    pub bind: OracleBind,
    pub omega: Vec<Vec<Vec<Vec<f64>>>>,
    pub fused: [Map; 4],
    pub bus: Map,
    pub hidden: Map,
}

pub fn modecell_step(
    params: &ModeCellParams,
    store: &ParamStore,
    x: &Map,
    h_prev: &Map,
    bus_prev: &Map,
) -> OracleStep {
    let bind = bind_slots(params, store, bus_prev, x, h_prev);
    let omega = importance_weights(params, store, &bind.input);
    let fused = GATES.map(|g| adaptive_fuse(params, store, g, &bind.input, &bind.slots, &omega));
    let (bus, hidden) = gate_and_transition(params, store, &fused, &bind.input, bus_prev);
    OracleStep {
        bind,
        omega,
        fused,
        bus,
        hidden,
    }
}
