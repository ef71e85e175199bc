use super::{gru, spectral, Binary, Node, Op, Tape, PAD_INDEX};
use super::{matmul_nt, matmul_tn};

/// Gradient slots indexed by node id.
struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn slot(&mut self, id: usize, len: usize) -> &mut Vec<f64> {
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }
}

pub(super) fn run(tape: &Tape, loss: usize) {
    let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();
    {
        let nodes = tape.nodes();
        let mut grads = Grads {
            slots: vec![None; loss + 1],
        };
        grads.slots[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_updates.push((id, g));
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
    }
    let mut inner = tape.inner.borrow_mut();
    for (id, g) in leaf_updates {
        match inner.leaf_grads.get_mut(&id) {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            None => {
                inner.leaf_grads.insert(id, g);
            }
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut Grads) {
    let wants = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Unary { x, kind } => {
            if wants(*x) {
                let xv = &nodes[*x].value;
                let dst = grads.slot(*x, xv.len());
                for i in 0..g.len() {
                    dst[i] += g[i] * kind.grad(xv[i], node.value[i]);
                }
            }
        }
        Op::Binary {
            a,
            b,
            kind,
            amap,
            bmap,
        } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let ai = |i: usize| amap.as_ref().map_or(i, |m| m[i]);
            let bi = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
            if wants(*a) {
                let dst = grads.slot(*a, av.len());
                match kind {
                    Binary::Add | Binary::Sub => {
                        for i in 0..g.len() {
                            dst[ai(i)] += g[i];
                        }
                    }
                    Binary::Mul => {
                        for i in 0..g.len() {
                            dst[ai(i)] += g[i] * bv[bi(i)];
                        }
                    }
                }
            }
            if wants(*b) {
                let dst = grads.slot(*b, bv.len());
                match kind {
                    Binary::Add => {
                        for i in 0..g.len() {
                            dst[bi(i)] += g[i];
                        }
                    }
                    Binary::Sub => {
                        for i in 0..g.len() {
                            dst[bi(i)] -= g[i];
                        }
                    }
                    Binary::Mul => {
                        for i in 0..g.len() {
                            dst[bi(i)] += g[i] * av[ai(i)];
                        }
                    }
                }
            }
        }
        Op::Sum { x } => {
            if wants(*x) {
                let len = nodes[*x].value.len();
                for d in grads.slot(*x, len).iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::SumAxis { x, outer, axis, inner } => {
            if wants(*x) {
                let len = nodes[*x].value.len();
                let dst = grads.slot(*x, len);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..*axis {
                        let row = &mut dst[(o * axis + a) * inner..(o * axis + a + 1) * inner];
                        for (d, s) in row.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if wants(*x) {
                let dst = grads.slot(*x, g.len());
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::Gather { x, idx } => {
            if wants(*x) {
                let len = nodes[*x].value.len();
                let dst = grads.slot(*x, len);
                for (&j, &v) in idx.iter().zip(g) {
                    if j != PAD_INDEX {
                        dst[j] += v;
                    }
                }
            }
        }
        Op::ScatterAdd { x, idx } => {
            if wants(*x) {
                let len = nodes[*x].value.len();
                let dst = grads.slot(*x, len);
                for (d, &j) in dst.iter_mut().zip(idx.iter()) {
                    if j != PAD_INDEX {
                        *d += g[j];
                    }
                }
            }
        }
        Op::Concat { xs, outer, widths } => {
            let row: usize = widths.iter().sum();
            let mut offset = 0;
            for (&x, &w) in xs.iter().zip(widths) {
                if wants(x) {
                    let dst = grads.slot(x, outer * w);
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + w];
                        for (d, s) in dst[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b,
        } => {
            let (m, k, n, batch) = (*m, *k, *n, *batch);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                let dst = grads.slot(*a, av.len());
                if *shared_b {
                    matmul_nt(batch * m, n, k, g, bv, dst);
                } else {
                    for p in 0..batch {
                        matmul_nt(
                            m,
                            n,
                            k,
                            &g[p * m * n..(p + 1) * m * n],
                            &bv[p * k * n..(p + 1) * k * n],
                            &mut dst[p * m * k..(p + 1) * m * k],
                        );
                    }
                }
            }
            if wants(*b) {
                let dst = grads.slot(*b, bv.len());
                if *shared_b {
                    matmul_tn(k, batch * m, n, av, g, dst);
                } else {
                    for p in 0..batch {
                        matmul_tn(
                            k,
                            m,
                            n,
                            &av[p * m * k..(p + 1) * m * k],
                            &g[p * m * n..(p + 1) * m * n],
                            &mut dst[p * k * n..(p + 1) * k * n],
                        );
                    }
                }
            }
        }
        Op::Softmax { x, width } => {
            if wants(*x) {
                let y = &node.value;
                let dst = grads.slot(*x, y.len());
                for r in 0..y.len() / width {
                    let (ys, gs) = (&y[r * width..(r + 1) * width], &g[r * width..(r + 1) * width]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..*width {
                        dst[r * width + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Op::Rfft { x, n } => {
            if wants(*x) {
                let len = nodes[*x].value.len();
                let dx = spectral::rfft_backward(g, *n);
                for (d, s) in grads.slot(*x, len).iter_mut().zip(&dx) {
                    *d += s;
                }
            }
        }
        Op::Irfft { x, n } => {
            if wants(*x) {
                let len = nodes[*x].value.len();
                let dx = spectral::irfft_backward(g, *n);
                for (d, s) in grads.slot(*x, len).iter_mut().zip(&dx) {
                    *d += s;
                }
            }
        }
        Op::Gru { gi, whh, bhh, cache } => {
            let whh_v = &nodes[*whh].value;
            let back = gru::backward(cache, whh_v, g);
            if wants(*gi) {
                let len = nodes[*gi].value.len();
                for (d, s) in grads.slot(*gi, len).iter_mut().zip(&back.d_gi) {
                    *d += s;
                }
            }
            if wants(*whh) {
                for (d, s) in grads.slot(*whh, whh_v.len()).iter_mut().zip(&back.d_whh) {
                    *d += s;
                }
            }
            if wants(*bhh) {
                let len = nodes[*bhh].value.len();
                for (d, s) in grads.slot(*bhh, len).iter_mut().zip(&back.d_bhh) {
                    *d += s;
                }
            }
        }
    }
}
