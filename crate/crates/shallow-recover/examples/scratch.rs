use nalgebra::{DMatrix, DVector};
use shallow_recover::datagen::*;
use shallow_recover::geometry::activation_moments;
use shallow_recover::model::*;
use shallow_recover::optimizer::aligned_error;
use shallow_recover::rng::*;
use shallow_recover::tensorinit::*;

struct MomentTables {
    a: Vec<f64>,
    g1: Vec<f64>,
    m3: Vec<f64>,
}

impl MomentTables {
    fn build() -> Self {
        let mut a = Vec::new();
        let mut g1 = Vec::new();
        let mut m3 = Vec::new();
        let steps = 1000;
        for i in 1..=steps {
            let ai = 10.0 * i as f64 / steps as f64;
            let m = activation_moments(ai).unwrap();
            a.push(ai);
            g1.push(m.gamma[1]);
            m3.push(m.gamma[3] - 3.0 * m.gamma[1]);
        }
        Self { a, g1, m3 }
    }

    fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        let x = x.clamp(xs[0], *xs.last().unwrap());
        let idx = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
        let (x0, x1) = (xs[idx - 1], xs[idx]);
        let (y0, y1) = (ys[idx - 1], ys[idx]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    fn g1_at(&self, a: f64) -> f64 {
        Self::interp(&self.a, &self.g1, a)
    }

    fn m3_at(&self, a: f64) -> f64 {
        Self::interp(&self.a, &self.m3, a)
    }

    fn g1_deriv(&self, a: f64) -> f64 {
        let h = 0.01;
        (self.g1_at(a + h) - self.g1_at(a - h)) / (2.0 * h)
    }

    fn m3_deriv(&self, a: f64) -> f64 {
        let h = 0.01;
        (self.m3_at(a + h) - self.m3_at(a - h)) / (2.0 * h)
    }

    fn inv_g1(&self, target: f64) -> f64 {
        let t = target.clamp(self.g1[0], *self.g1.last().unwrap());
        let idx = self.g1.partition_point(|&g| g < t).min(self.a.len() - 1);
        self.a[idx]
    }
}

/// Objective: ||M3(W)-M3hat||^2/||M3hat||^2 + lam*||M1(W)-M1hat||^2/||M1hat||^2
fn refine_moments(
    tables: &MomentTables,
    m3hat: &Tensor3,
    m1hat: &DVector<f64>,
    w0: &DMatrix<f64>,
    lam: f64,
    iters: usize,
    step0: f64,
) -> (DMatrix<f64>, f64) {
    let d = w0.nrows();
    let k = w0.ncols();
    let m3n2 = m3hat.data.iter().map(|v| v * v).sum::<f64>();
    let m1n2 = m1hat.norm_squared();
    let obj_and_grad = |w: &DMatrix<f64>| -> (f64, DMatrix<f64>) {
        let mut delta = m3hat.clone();
        for v in delta.data.iter_mut() {
            *v = -*v;
        }
        let mut r1 = -m1hat.clone();
        let mut units = Vec::with_capacity(k);
        let mut mags = Vec::with_capacity(k);
        for i in 0..k {
            let col = w.column(i).into_owned();
            let a = col.norm().max(1e-8);
            let u = col / a;
            delta.add_rank_one(tables.m3_at(a) / k as f64, &u);
            r1 += u.clone() * (tables.g1_at(a) / k as f64);
            units.push(u);
            mags.push(a);
        }
        let mut f = delta.data.iter().map(|v| v * v).sum::<f64>() / m3n2
            + lam * r1.norm_squared() / m1n2;
        let mut grad = DMatrix::zeros(d, k);
        for i in 0..k {
            let u = &units[i];
            let a = mags[i];
            let m3a = tables.m3_at(a);
            let g1a = tables.g1_at(a);
            let gi = delta.apply2(u);
            let tuu = u.dot(&gi);
            let proj = &gi - u * tuu;
            let gt = proj * (3.0 * m3a / a) + u * (tables.m3_deriv(a) * tuu);
            let ur = u.dot(&r1);
            let p1 = (&r1 - u * ur) * (g1a / a) + u * (tables.g1_deriv(a) * ur);
            let g = gt * (2.0 / (k as f64 * m3n2)) + p1 * (2.0 * lam / (k as f64 * m1n2));
            grad.set_column(i, &g);
        }
        f = f.max(0.0);
        (f, grad)
    };

    let mut w = w0.clone();
    let mut step = step0;
    let (mut f, mut g) = obj_and_grad(&w);
    for _ in 0..iters {
        let wn = &w - &g * step;
        let (fn_, gn) = obj_and_grad(&wn);
        if fn_ < f {
            w = wn;
            f = fn_;
            g = gn;
            step *= 1.2;
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    (w, f)
}

fn main() {
    let tables = MomentTables::build();
    let d = 10usize;
    let k = 3usize;
    let n = 100_000usize;
    let mut ratios = Vec::new();
    for seed in 1..=10u64 {
        let truth = make_ground_truth(&GroundTruthSpec {
            kind: ModelKind::Fcn,
            d,
            k,
            scale: 0.9,
            seed,
        })
        .unwrap();
        let tf = match &truth {
            NetworkWeights::Fcn(f) => f.clone(),
            _ => unreachable!(),
        };
        let w = &tf.mat;
        let mut s = RngStream::new(seed, StreamId::new("scratch", 0));
        let data = sample_dataset(&truth, n, &mut s).unwrap();
        let m3 = estimate_m3_dense(&data).unwrap();
        let m1 = estimate_m1(&data).unwrap();
        let t = Tensor3 { k: d, data: m3.clone() };

        // ---- candidate pool ----
        let mut pool: Vec<DVector<f64>> = Vec::new();
        let mut work = t.clone();
        for v in work.data.iter_mut() {
            *v = -*v;
        }
        let mut ps = RngStream::new(seed, StreamId::new("power", 0));
        for _comp in 0..3 * k {
            let mut best: Option<(DVector<f64>, f64)> = None;
            for _start in 0..60 {
                let mut u = DVector::from_vec(ps.unit_vector(d));
                for _ in 0..30 {
                    let mut nu = work.apply2(&u);
                    let nn = nu.norm();
                    if nn < 1e-14 {
                        break;
                    }
                    nu /= nn;
                    u = nu;
                }
                let val = work.apply3(&u);
                if best.as_ref().map_or(true, |(_, b)| val > *b) {
                    best = Some((u, val));
                }
            }
            let (u, lam) = best.unwrap();
            work.add_rank_one(-lam, &u);
            pool.push(u);
        }
        let vq = subspace_from_m3(&m3, d, k).unwrap();
        let rq = project_dense_m3(&m3, d, &vq).unwrap();
        let mut js = RngStream::new(seed, StreamId::new("probe", 0));
        if let Ok((us, _)) = decompose_r3(&rq, k, &mut js) {
            for u in &us {
                let lift = &vq * u;
                pool.push(lift.clone() / lift.norm());
            }
        }

        // ---- subset selection: tensor fit + m1 fit ----
        let p = pool.len();
        let mut scored: Vec<(Vec<usize>, Vec<f64>, f64)> = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if pool[i].dot(&pool[j]).abs() > 0.9 {
                    continue;
                }
                for l in j + 1..p {
                    if pool[i].dot(&pool[l]).abs() > 0.9
                        || pool[j].dot(&pool[l]).abs() > 0.9
                    {
                        continue;
                    }
                    let idx = vec![i, j, l];
                    let sel: Vec<DVector<f64>> =
                        idx.iter().map(|&ii| pool[ii].clone()).collect();
                    // tensor fit
                    let mut design = DMatrix::zeros(d * d * d, k);
                    for (col, u) in sel.iter().enumerate() {
                        let mut tt = Tensor3::zeros(d);
                        tt.add_rank_one(1.0, u);
                        for (ii, v) in tt.data.iter().enumerate() {
                            design[(ii, col)] = *v;
                        }
                    }
                    let target = DVector::from_column_slice(&t.data);
                    let c = design.clone().svd(true, true).solve(&target, 1e-12).unwrap();
                    let t_rel = (&design * &c - &target).norm() / target.norm();
                    // m1 fit
                    let mut d1 = DMatrix::zeros(d, k);
                    for (col, u) in sel.iter().enumerate() {
                        d1.set_column(col, u);
                    }
                    let b = d1.clone().svd(true, true).solve(&m1, 1e-12).unwrap();
                    let m1_rel = (&d1 * &b - &m1).norm() / m1.norm();
                    let score = t_rel * t_rel + m1_rel * m1_rel;
                    scored.push((idx, b.iter().copied().collect(), score));
                }
            }
        }
        scored.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
        let mut best_ref: Option<(DMatrix<f64>, f64)> = None;
        let mut err0 = f64::NAN;
        for (rank, (idx, b, _)) in scored.iter().take(8).enumerate() {
            let mut w_init = DMatrix::zeros(d, k);
            for (col, &ii) in idx.iter().enumerate() {
                let sgn = if b[col] >= 0.0 { 1.0 } else { -1.0 };
                let a = tables.inv_g1((k as f64) * b[col].abs());
                w_init.set_column(col, &(pool[ii].clone() * (sgn * a)));
            }
            if rank == 0 {
                let (e, _) = aligned_error(&FcnWeights::new(w_init.clone()), &tf).unwrap();
                err0 = e;
            }
            let (w_ref, _f_final) = refine_moments(&tables, &t, &m1, &w_init, 1.0, 400, 1.0);
            let loss = batch_loss(&NetworkWeights::Fcn(FcnWeights::new(w_ref.clone())), &data)
                .unwrap();
            if best_ref.as_ref().map_or(true, |(_, bf)| loss < *bf) {
                best_ref = Some((w_ref, loss));
            }
        }
        let (w_ref, _) = best_ref.unwrap();
        // oracle-subset refinement and truth refinement for comparison
        let cos_total = |idx: &Vec<usize>| -> f64 {
            (0..k)
                .map(|i| {
                    let wi = w.column(i).into_owned();
                    let wbar = &wi / wi.norm();
                    idx.iter()
                        .map(|&ii| pool[ii].dot(&wbar).abs())
                        .fold(0.0f64, f64::max)
                })
                .sum()
        };
        let onorm = tf.frobenius_norm();
        let oracle_idx = scored
            .iter()
            .map(|(idx, b, _)| (idx.clone(), b.clone()))
            .max_by(|a, bb| cos_total(&a.0).partial_cmp(&cos_total(&bb.0)).unwrap())
            .unwrap();
        let mut w_or = DMatrix::zeros(d, k);
        for (col, &ii) in oracle_idx.0.iter().enumerate() {
            let sgn = if oracle_idx.1[col] >= 0.0 { 1.0 } else { -1.0 };
            let a = tables.inv_g1((k as f64) * oracle_idx.1[col].abs());
            w_or.set_column(col, &(pool[ii].clone() * (sgn * a)));
        }
        let (w_or_ref, _) = refine_moments(&tables, &t, &m1, &w_or, 1.0, 400, 1.0);
        let (err_or, _) = aligned_error(&FcnWeights::new(w_or_ref), &tf).unwrap();
        let (w_tr_ref, _) = refine_moments(&tables, &t, &m1, &tf.mat, 1.0, 400, 1.0);
        let (err_tr, _) = aligned_error(&FcnWeights::new(w_tr_ref), &tf).unwrap();
        print!("  oracle_ref={:.3} truth_ref={:.3}  ", err_or / onorm, err_tr / onorm);
        let (err1, _) = aligned_error(&FcnWeights::new(w_ref.clone()), &tf).unwrap();
        let nrm = tf.frobenius_norm();
        // GD polish from the refined moment init
        use shallow_recover::optimizer::{gd_run, GDConfig};
        let mut cfg = GDConfig::default_for(&NetworkWeights::Fcn(FcnWeights::new(w_ref.clone())));
        cfg.max_iters = 400;
        let tr = gd_run(
            &data,
            &NetworkWeights::Fcn(FcnWeights::new(w_ref.clone())),
            &cfg,
            None,
        )
        .unwrap();
        let wp = match &tr.final_weights {
            NetworkWeights::Fcn(f) => f.clone(),
            _ => unreachable!(),
        };
        let (errp, _) = aligned_error(&wp, &tf).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.max_iters = 3500;
        let tr2 = gd_run(
            &data,
            &NetworkWeights::Fcn(FcnWeights::new(w_ref.clone())),
            &cfg2,
            None,
        )
        .unwrap();
        let wp2 = match &tr2.final_weights {
            NetworkWeights::Fcn(f) => f.clone(),
            _ => unreachable!(),
        };
        let (errp2, _) = aligned_error(&wp2, &tf).unwrap();
        println!(
            "seed={seed}: ratio_init={:.3} ratio_refined={:.3} polish400={:.3} full3500={:.3}",
            err0 / nrm,
            err1 / nrm,
            errp / nrm,
            errp2 / nrm
        );
        ratios.push(errp / nrm);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("median refined ratio = {:.3}", ratios[ratios.len() / 2]);
}
