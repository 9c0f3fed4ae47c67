//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sparse_pi::engine::{run_inference, Backend, MaskStructure, RunMode, SparsitySource};
use sparse_pi::kvcache::{simulate_trace, synthetic_head_trace, CacheStrategy, PrefetchPolicy, TraceShape};
use sparse_pi::model::{random_prompt, ModelConfig, ModelWeights};
use sparse_pi::perm::Permutation;
use sparse_pi::predictor::{predict_mpc, predict_plain, Granularity, PredictorWeights};
use sparse_pi::protocols::{run_two_party, RunConfig, Session};
use sparse_pi::ring::{FixedPointCodec, RingMatrix, RingValue};
use sparse_pi::scenario::{run_scenario, Scenario};
use sparse_pi::sharing::{reconstruct, share, ShareMatrix};
use sparse_pi::sparse::{apply_dp_perturbation, cost, pi_simm, pi_somm, SparsityMask};
use sparse_pi::transport::{phase, TranscriptMode};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn pick(s: &Session, pair: &(ShareMatrix, ShareMatrix)) -> ShareMatrix {
    if s.party().is_first() { pair.0.clone() } else { pair.1.clone() }
}

fn random_ring(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> RingMatrix {
    RingMatrix::from_fn(rows, cols, |_, _| RingValue(rng.random()))
}

fn random_mask(rows: usize, cols: usize, density: f64, rng: &mut ChaCha20Rng) -> SparsityMask {
    SparsityMask::from_fn(rows, cols, |_, _| rng.random_bool(density))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn protocol_correctness() -> Outcome {
    const N: usize = 1000;
    let t = Instant::now();
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(1);

    // matmul, somm, simm instances: (x, y, mask)
    let mut mm = Vec::with_capacity(N);
    for i in 0..N {
        let (a, n, b) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let (x, y) = (random_ring(a, n, &mut rng), random_ring(n, b, &mut rng));
        let out_mask = random_mask(a, b, 0.4, &mut rng);
        let in_mask = random_mask(a, n, 0.4, &mut rng);
        let xs = RingMatrix::from_fn(a, n, |r, c| if in_mask.get(r, c) { x.get(r, c) } else { RingValue::ZERO });
        mm.push((share(&x, 10 * i as u64), share(&y, 10 * i as u64 + 1), share(&xs, 10 * i as u64 + 2), x, y, xs, out_mask, in_mask));
    }
    let mut shuffles = Vec::with_capacity(N);
    for i in 0..N {
        let (n, w) = (rng.random_range(1..9), rng.random_range(1..4));
        let x = random_ring(n, w, &mut rng);
        shuffles.push((share(&x, 7_000_000 + i as u64), Permutation::random(n, &mut rng), x));
    }
    let mut preds = Vec::with_capacity(N);
    for i in 0..N {
        let (h, o) = (rng.random_range(3..8), rng.random_range(3..8));
        let r = rng.random_range(1..h.min(o));
        let w = PredictorWeights::random(h, r, o, 1.0, i as u64).map_err(err)?.encode(&codec).map_err(err)?;
        let tokens = rng.random_range(1..4);
        let x: Vec<f64> = (0..tokens * h).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xm = RingMatrix::encode(&codec, tokens, h, &x).map_err(err)?;
        let pair = w.share(&mut rng);
        preds.push((share(&xm, 9_000_000 + i as u64), pair, w, xm));
    }
    // fixed-point chains: k multiplications of values in [-1, 1]
    let mut chains = Vec::with_capacity(N);
    for i in 0..N {
        let k = rng.random_range(1..5);
        let vals: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let enc = RingMatrix::encode(&codec, 1, k + 1, &vals).map_err(err)?;
        chains.push((share(&enc, 11_000_000 + i as u64), vals));
    }

    let out = run_two_party(&RunConfig::seeded(3), |s| {
        let mut res = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (xp, yp, xsp, _, _, _, om, im) in &mm {
            let (x, y, xs) = (pick(s, xp), pick(s, yp), pick(s, xsp));
            res.0.push(s.pi_matmul(&x, &y)?);
            res.1.push(pi_somm(s, &x, &y, om)?);
            res.2.push(pi_simm(s, &xs, &y, im)?);
        }
        for (xp, pi, _) in &shuffles {
            let corr = s.new_shuffle_with(pi.clone())?;
            let z = s.pi_shuffle(&pick(s, xp), &corr)?;
            let back = s.pi_unshuffle(&z, &corr)?;
            res.3.push((z, back));
        }
        for (xp, pair, _, _) in &preds {
            res.4.push(predict_mpc(s, &pick(s, xp), &pair[s.party().index()])?);
        }
        for (vp, _) in &chains {
            let v = pick(s, vp).values.into_data();
            let mut acc = vec![v[0]];
            for &next in &v[1..] {
                let prod = s.pi_hadamard(&acc, &[next])?;
                acc = s.truncate_values(&prod)?;
            }
            res.5.push(acc[0]);
        }
        res.6.push(());
        Ok(res)
    })
    .map_err(err)?;
    let [a, b] = &out.outputs;

    for (i, (_, _, _, x, y, xs, om, _)) in mm.iter().enumerate() {
        let prod = x.matmul(y).map_err(err)?;
        ensure!(reconstruct(&a.0[i], &b.0[i]).map_err(err)? == prod, "matmul instance {i}");
        let somm = reconstruct(&a.1[i], &b.1[i]).map_err(err)?;
        for r in 0..om.rows() {
            for c in 0..om.cols() {
                let want = if om.get(r, c) { prod.get(r, c) } else { RingValue::ZERO };
                ensure!(somm.get(r, c) == want, "somm instance {i} at ({r},{c})");
            }
        }
        ensure!(reconstruct(&a.2[i], &b.2[i]).map_err(err)? == xs.matmul(y).map_err(err)?, "simm instance {i}");
    }
    for (i, (_, pi, x)) in shuffles.iter().enumerate() {
        let z = reconstruct(&a.3[i].0, &b.3[i].0).map_err(err)?;
        ensure!(z == pi.apply_rows(x), "shuffle instance {i}");
        ensure!(reconstruct(&a.3[i].1, &b.3[i].1).map_err(err)? == *x, "unshuffle instance {i}");
    }
    for (i, (_, _, w, xm)) in preds.iter().enumerate() {
        let want = predict_plain(w, &codec, xm, Granularity::Neuron).map_err(err)?;
        let got = reconstruct(&a.4[i], &b.4[i]).map_err(err)?;
        let bits: Vec<u8> = got.data().iter().map(|v| v.0 as u8).collect();
        ensure!(bits == want.bits, "predictor instance {i}");
    }
    let step = 2f64.powi(-(codec.frac() as i32) + 2);
    let mut worst = 0.0f64;
    for (i, (_, vals)) in chains.iter().enumerate() {
        let k = vals.len() - 1;
        let got = codec.decode(a.5[i] + b.5[i]);
        let want: f64 = vals.iter().product();
        let e = (got - want).abs();
        worst = worst.max(e / k as f64);
        ensure!(e <= k as f64 * step, "fixed-point chain {i}: error {e} over {k} multiplications");
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{N} instances each of matmul/somm/simm/shuffle/predictor/fixed-point; worst error per multiplication {:.2e} ≤ {step:.2e}; {secs:.1}s",
        worst
    ))
}

// ---------------------------------------------------------------- 2

fn shuffle_cost() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let cases: Vec<(usize, usize)> = (0..50).map(|_| (rng.random_range(1..300), rng.random_range(1..4))).collect();
    let data: Vec<_> = cases.iter().enumerate().map(|(i, &(n, w))| share(&random_ring(n, w, &mut rng), i as u64)).collect();
    let out = run_two_party(&RunConfig::seeded(5), |s| {
        let mut per_call = Vec::new();
        for (pair, &(n, w)) in data.iter().zip(&cases) {
            let corr = s.new_shuffle(n)?;
            let before = s.ledger().clone();
            let _ = s.pi_shuffle(&pick(s, pair), &corr)?;
            let d = s.ledger().delta_since(&before);
            per_call.push((d.party_elements(s.party()), d.total_rounds(), (n * w) as u64));
        }
        Ok(per_call)
    })
    .map_err(err)?;
    for (sent, rounds, want) in out.outputs.iter().flatten() {
        ensure!(*rounds == 1 && sent == want, "shuffle sent {sent} elements in {rounds} rounds, expected {want} in 1");
    }

    // Shuffle-based indexing of n entries: shuffle the bits and the data,
    // open the bits, keep the flagged rows.
    let n = 16384usize;
    let m = 1638usize;
    let mut bits = vec![RingValue::ZERO; n];
    for i in rand::seq::index::sample(&mut rng, n, m) {
        bits[i] = RingValue(1);
    }
    let data = random_ring(n, 1, &mut rng);
    let bits_m = RingMatrix::column(bits.clone());
    let (bp, dp) = (share(&bits_m, 100), share(&data, 101));
    let out = run_two_party(&RunConfig::seeded(6), |s| {
        let corr = s.new_shuffle(n)?;
        let (sb, sd) = s.in_phase("IndexShuffle", |s| Ok((s.pi_shuffle(&pick(s, &bp), &corr)?, s.pi_shuffle(&pick(s, &dp), &corr)?)))?;
        let opened = s.in_phase("IndexOpen", |s| s.open(&sb))?;
        let keep: Vec<usize> = (0..n).filter(|&i| opened.get(i, 0) == RingValue(1)).collect();
        Ok(sd.select_rows(&keep))
    })
    .map_err(err)?;
    let picked = reconstruct(&out.outputs[0], &out.outputs[1]).map_err(err)?;
    let mut got: Vec<u64> = picked.data().iter().map(|v| v.0).collect();
    let mut want: Vec<u64> = (0..n).filter(|&i| bits[i].0 == 1).map(|i| data.get(i, 0).0).collect();
    got.sort_unstable();
    want.sort_unstable();
    ensure!(got == want, "indexing selected the wrong entries");
    let shuffled = out.ledger.phase("IndexShuffle").total_elements();
    let opened = out.ledger.phase("IndexOpen").total_elements();
    ensure!(shuffled == cost::shuffle_index(n), "indexing shuffles cost {shuffled}, expected 4n = {}", 4 * n);
    let classical = cost::classical_index(n, m, 64);
    ensure!(classical == 3_490_276_608, "classical formula gave {classical}");
    let ratio = classical as f64 / shuffled as f64;
    let ratio_open = classical as f64 / (shuffled + opened) as f64;
    ensure!(ratio > 1e4 && ratio_open > 1e4, "ratio {ratio:.0} / {ratio_open:.0}");
    Ok(format!(
        "50 shuffles at n·w elements and 1 round per party; indexing 4n = {shuffled} (+{opened} to open the bits) vs classical {classical}: ratio {ratio:.0} ({ratio_open:.0} with the opening)"
    ))
}

// ---------------------------------------------------------------- 3

/// Brute-force minimum over all partitions of the mask's nonzeros into
/// groups, each group paying for the rows and columns it touches:
/// lexicographic (Σ|rows|+|cols|, Σ|rows|·|cols|).
fn partition_oracle(edges: &[(usize, usize)]) -> (u64, u64) {
    let m = edges.len();
    let full = (1usize << m) - 1;
    let group: Vec<(u64, u64)> = (0..=full)
        .map(|t| {
            let (mut rows, mut cols) = (0u64, 0u64);
            for (k, &(r, c)) in edges.iter().enumerate() {
                if t >> k & 1 == 1 {
                    rows |= 1 << r;
                    cols |= 1 << c;
                }
            }
            let (a, b) = (rows.count_ones() as u64, cols.count_ones() as u64);
            (a + b, a * b)
        })
        .collect();
    let mut best = vec![(u64::MAX, u64::MAX); full + 1];
    best[0] = (0, 0);
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s ^ low;
        // subsets of `rest`, each joined with the lowest edge
        let mut sub = rest;
        loop {
            let t = sub | low;
            let (g, r) = (group[t], best[s ^ t]);
            let cand = (g.0 + r.0, g.1 + r.1);
            if cand < best[s] {
                best[s] = cand;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    best[full]
}

fn somm_oracle() -> Outcome {
    let t = Instant::now();
    let mut masks: Vec<SparsityMask> = (0u32..1 << 16)
        .filter(|b| b.count_ones() <= 8)
        .map(|b| SparsityMask::from_fn(4, 4, |i, j| b >> (4 * i + j) & 1 == 1))
        .collect();
    let exhaustive = masks.len();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.random_range(1..=12);
        let pos: Vec<(usize, usize)> =
            rand::seq::index::sample(&mut rng, 36, k).into_iter().map(|p| (p / 6, p % 6)).collect();
        masks.push(SparsityMask::from_positions(6, 6, &pos).map_err(err)?);
    }
    let n = 3usize;
    let x4 = random_ring(4, n, &mut rng);
    let y4 = random_ring(n, 4, &mut rng);
    let x6 = random_ring(6, n, &mut rng);
    let y6 = random_ring(n, 6, &mut rng);
    let (x4p, y4p, x6p, y6p) = (share(&x4, 1), share(&y4, 2), share(&x6, 3), share(&y6, 4));
    let out = run_two_party(&RunConfig::seeded(7), |s| {
        let (x4, y4, x6, y6) = (pick(s, &x4p), pick(s, &y4p), pick(s, &x6p), pick(s, &y6p));
        let mut res = Vec::with_capacity(masks.len());
        for m in &masks {
            let (x, y) = if m.rows() == 4 { (&x4, &y4) } else { (&x6, &y6) };
            let before = s.ledger().clone();
            let dots = s.stats().dot_products;
            let z = pi_somm(s, x, y, m)?;
            let sent = s.ledger().delta_since(&before).party_elements(s.party());
            res.push((z, sent, s.stats().dot_products - dots));
        }
        Ok(res)
    })
    .map_err(err)?;
    let (p4, p6) = (x4.matmul(&y4).map_err(err)?, x6.matmul(&y6).map_err(err)?);
    for (i, m) in masks.iter().enumerate() {
        let (a, b) = (&out.outputs[0][i], &out.outputs[1][i]);
        let edges: Vec<(usize, usize)> = m.positions().collect();
        let (units, dots) = partition_oracle(&edges);
        let total = a.1 + b.1;
        ensure!(a.1 == b.1, "mask {i}: parties sent {} and {}", a.1, b.1);
        ensure!(total == 2 * n as u64 * units, "mask {i}: ledger {total}, oracle {}", 2 * n as u64 * units);
        ensure!(a.2 == dots, "mask {i}: {} dot products, oracle minimum {dots}", a.2);
        let z = reconstruct(&a.0, &b.0).map_err(err)?;
        let p = if m.rows() == 4 { &p4 } else { &p6 };
        for (r, c) in edges {
            ensure!(z.get(r, c) == p.get(r, c), "mask {i}: wrong output at ({r},{c})");
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.1}s");
    Ok(format!(
        "{exhaustive} exhaustive 4×4 masks (≤8 nonzeros) + 1000 random 6×6 masks (≤12 nonzeros) match the partition oracle in traffic and dot products; {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- 4

fn simm_properties() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut cases = Vec::with_capacity(1000);
    for i in 0..1000u64 {
        let (a, n, p) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..6));
        let mut mask = random_mask(a, n, rng.random_range(0.1..0.9), &mut rng);
        if mask.nnz() == 0 {
            mask.set(0, 0, true);
        }
        let x = random_ring(a, n, &mut rng);
        let xs = RingMatrix::from_fn(a, n, |r, c| if mask.get(r, c) { x.get(r, c) } else { RingValue::ZERO });
        let y = random_ring(n, p, &mut rng);
        cases.push((share(&xs, 2 * i), share(&y, 2 * i + 1), xs, y, mask));
    }
    let cfg = RunConfig { transcript: TranscriptMode::Shape, ..RunConfig::seeded(8) };
    let out = run_two_party(&cfg, |s| {
        let mut res = Vec::new();
        for (xp, yp, _, _, mask) in &cases {
            let before = s.stats().scalar_mults;
            let z = pi_simm(s, &pick(s, xp), &pick(s, yp), mask)?;
            res.push((z, s.stats().scalar_mults - before));
        }
        Ok(res)
    })
    .map_err(err)?;
    for party in 0..2 {
        let entries: Vec<_> = out.transcripts[party].iter().filter(|e| e.label == "simm").collect();
        ensure!(entries.len() == cases.len(), "party {party}: {} SIMM messages for {} calls", entries.len(), cases.len());
        for (i, ((_, _, _, y, mask), e)) in cases.iter().zip(&entries).enumerate() {
            let needed = mask.nonzero_cols();
            let rows: Vec<(usize, usize)> = e
                .segments
                .iter()
                .filter_map(|(name, len)| name.strip_prefix("y:row").map(|j| (j.parse().unwrap(), *len)))
                .collect();
            let sent: Vec<usize> = rows.iter().map(|r| r.0).collect();
            ensure!(sent == needed, "instance {i}: rows of Y sent {sent:?}, needed {needed:?}");
            ensure!(rows.iter().all(|r| r.1 == y.cols()), "instance {i}: a row of Y sent with the wrong width");
        }
    }
    for (i, (_, _, xs, y, mask)) in cases.iter().enumerate() {
        let (a, b) = (&out.outputs[0][i], &out.outputs[1][i]);
        ensure!(a.1 == (mask.nnz() * y.cols()) as u64, "instance {i}: {} scalar multiplications, expected nnz·p", a.1);
        ensure!(reconstruct(&a.0, &b.0).map_err(err)? == xs.matmul(y).map_err(err)?, "instance {i}: wrong product");
    }
    Ok("1000 instances: each needed row of Y masked and sent once per party, scalar multiplications = nnz(X)·p, exact products".into())
}

// ---------------------------------------------------------------- 5

fn counting_reproduction() -> Outcome {
    let (m, n, p) = (512usize, 4096usize, 16384usize);
    let gemm = cost::gemm(m, n, p);
    let keep = |s: f64| ((1.0 - s) * p as f64).round() as usize;
    let r90 = gemm as f64 / cost::somm_columns(m, n, keep(0.9)) as f64;
    let r0 = gemm as f64 / cost::somm_columns(m, n, keep(0.0)) as f64;
    ensure!((r90 - 7.86).abs() < 0.005, "GEMM/SOMM at 0.9 = {r90:.3}, expected 7.86");
    ensure!((r90 / 8.1 - 1.0).abs() <= 0.15, "{r90:.2} not within 15% of 8.1");
    ensure!((r0 - 1.0).abs() <= 0.01, "GEMM/SOMM at 0 = {r0:.4}");

    // the counting formula is what the protocol actually sends
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (sm, sn, sp) = (8usize, 16usize, 64usize);
    let cols: Vec<bool> = (0..sp).map(|j| j % 10 == 0).collect();
    let mask = SparsityMask::from_columns(sm, &cols);
    let (xp, yp) = (share(&random_ring(sm, sn, &mut rng), 1), share(&random_ring(sn, sp, &mut rng), 2));
    let out = run_two_party(&RunConfig::seeded(9), |s| pi_somm(s, &pick(s, &xp), &pick(s, &yp), &mask)).map_err(err)?;
    let k = cols.iter().filter(|&&c| c).count();
    ensure!(out.ledger.total_elements() == cost::somm_columns(sm, sn, k), "executed SOMM disagrees with the formula");

    // SpGEMM baseline over SOMM (FC1 shape) and SIMM (FC2 shape) as height grows
    let mut lines = Vec::new();
    for s in [0.9, 0.95, 0.99] {
        let k = keep(s);
        let mut prev = (0.0, 0.0);
        for h in [1usize, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048] {
            let somm = cost::spgemm_columns(h, n, k) as f64 / cost::somm_columns(h, n, k) as f64;
            let fc2 = SparsityMask::from_columns(h, &(0..p).map(|j| j < k).collect::<Vec<_>>());
            let simm = cost::spgemm_input(&fc2, n) as f64 / cost::simm(&fc2, n) as f64;
            ensure!(somm > prev.0 && simm > prev.1 || h == 1, "ratio not increasing at height {h}, sparsity {s}");
            if h >= 512 {
                ensure!(somm > 100.0 && simm > 100.0, "height {h}, sparsity {s}: {somm:.0}× / {simm:.0}×");
            }
            if h == 512 {
                lines.push(format!("s={s}: {somm:.0}×/{simm:.0}×"));
            }
            prev = (somm, simm);
        }
    }
    Ok(format!(
        "GEMM/SOMM {r90:.2}× at 0.9 (8.1× reported), {r0:.3}× at 0; SpGEMM over SOMM/SIMM at height 512: {}",
        lines.join(", ")
    ))
}

// ---------------------------------------------------------------- 6

fn kv_cache() -> Outcome {
    // (d) threshold
    let policy = PrefetchPolicy::new(524_288, 4096).map_err(err)?;
    for l1 in [128u64, 129, 200, 500, 1000] {
        for l2 in 0..=l1 {
            ensure!(policy.should_prefetch(l2, l1) == (l2 > 128), "L2={l2}, L1={l1}");
        }
    }

    // (b), (c), (e) on a 2048-token trace
    let (hidden, d, heads) = (4096usize, 128usize, 32usize);
    let trace = synthetic_head_trace(2048, heads, &TraceShape::default(), 11);
    let rate = trace.activation_rate();
    ensure!((rate - 0.5).abs() <= 0.03, "activation rate {rate:.3}");
    let pol = PrefetchPolicy::joint(hidden, d);
    let run = |s| simulate_trace(&trace, s, &pol, hidden, d).map_err(err);
    let (pr, mr, mp) = (run(CacheStrategy::PerRequest)?, run(CacheStrategy::Merged)?, run(CacheStrategy::MergedPrefetch)?);
    let (rp, rm, rmp) = (pr.refill_elements(), mr.refill_elements(), mp.refill_elements());
    let (tp, tm, tmp) = (pr.ledger.total_elements(), mr.ledger.total_elements(), mp.ledger.total_elements());
    ensure!(rmp < rm && rm < rp, "refill: prefetch {rmp}, merged {rm}, per-request {rp}");
    ensure!(tmp < tm && tm < tp, "totals: prefetch {tmp}, merged {tm}, per-request {tp}");
    let merge_gain = rp as f64 / rm as f64;
    ensure!(merge_gain >= 2.5, "per-request / merged refill = {merge_gain:.2}");

    // (e) until some inactive head's miss count exceeds w/x, prefetching
    // changes nothing. Under merged refills a head's misses are the tokens
    // since its last activation.
    let threshold = (pol.w / pol.x) as usize;
    let mut last: Vec<Option<usize>> = vec![None; heads];
    let mut horizon = trace.len();
    for (t, act) in trace.active.iter().enumerate() {
        let over = (0..heads).any(|g| !act[g] && last[g].map_or(t, |s| t - s - 1) > threshold);
        if over {
            horizon = t;
            break;
        }
        for g in 0..heads {
            if act[g] {
                last[g] = Some(t);
            }
        }
    }
    ensure!(horizon > 0 && horizon < trace.len(), "no early phase on this trace (horizon {horizon})");
    for t in 0..horizon {
        ensure!(mp.rows[t] == mr.rows[t], "token {t}: prefetch run differs from merged before any L2 > w/x");
    }
    ensure!(mp.rows.iter().any(|r| r.prefetched > 0), "prefetch never triggered");

    // (a) same logits whatever the refill strategy, with prefetch firing
    let codec = FixedPointCodec::default();
    let model = ModelWeights::random(&ModelConfig::toy(), 21).map_err(err)?.encode(&codec).map_err(err)?;
    let prompt = random_prompt(model.config.vocab, 16, 21);
    let small = PrefetchPolicy::new(2 * model.config.hidden as u64, model.config.hidden as u64).map_err(err)?;
    let mut logits = Vec::new();
    let mut prefetched = 0;
    let mut misses = 0;
    for cache in CacheStrategy::ALL {
        let mode = RunMode {
            sparsity: SparsitySource::Synthetic { ffn_sparsity: 0.9, mha_sparsity: 0.5, structure: MaskStructure::Column },
            cache,
            prefetch: Some(small),
            ..RunMode::default()
        };
        let out = run_inference(&model, &prompt, 12, &mode, &RunConfig::seeded(4)).map_err(err)?;
        if cache == CacheStrategy::MergedPrefetch {
            prefetched = out.steps.iter().flat_map(|s| &s.layers).map(|l| l.prefetched).sum();
        }
        misses += out.steps.iter().flat_map(|s| &s.layers).map(|l| l.misses).sum::<usize>();
        logits.push(out.logits);
    }
    ensure!(logits[0] == logits[1] && logits[1] == logits[2], "logits differ between cache strategies");
    ensure!(prefetched > 0 && misses > 0, "engine run exercised no refills ({misses}) or prefetches ({prefetched})");

    Ok(format!(
        "rate {rate:.3}; refill PR {rp} > MR {rm} > MR+prefetch {rmp} (PR/MR {merge_gain:.1}×, prefetch {:.2}×); totals strictly ordered; \
         L2>128 rule exact; prefetch = merged for the first {horizon} tokens; toy logits equal across strategies ({misses} misses, {prefetched} prefetched heads)",
        rm as f64 / rmp as f64
    ))
}

// ---------------------------------------------------------------- 7

fn dp_suite() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let eps = [0.01, 0.1, 0.5, 1.0, 5.0];
    let cases: Vec<_> = (0..10_000u64)
        .map(|i| {
            let n = rng.random_range(4..48);
            let m = random_mask(1, n, rng.random_range(0.0..1.0), &mut rng).to_ring();
            (share(&m, i), m, eps[i as usize % eps.len()])
        })
        .collect();
    let out = run_two_party(&RunConfig::seeded(10), |s| {
        cases.iter().map(|(p, _, e)| apply_dp_perturbation(s, &pick(s, p), *e)).collect::<sparse_pi::Result<Vec<_>>>()
    })
    .map_err(err)?;
    let mut flipped = 0usize;
    for (i, (_, m, _)) in cases.iter().enumerate() {
        let got = reconstruct(&out.outputs[0][i], &out.outputs[1][i]).map_err(err)?;
        for (a, b) in m.data().iter().zip(got.data()) {
            ensure!(b.0 <= 1, "trial {i}: non-binary output");
            ensure!(!(a.0 == 1 && b.0 == 0), "trial {i}: a one became zero");
            flipped += (a.0 == 0 && b.0 == 1) as usize;
        }
    }

    // calibration: 11008 neurons, 89.4% inactive, ε = 0.01
    let n = 11008usize;
    let ones = (n as f64 * (1.0 - 0.894)).round() as usize;
    let trials = 20u64;
    let masks: Vec<_> = (0..trials)
        .map(|i| {
            let mut row = vec![RingValue::ZERO; n];
            for j in rand::seq::index::sample(&mut rng, n, ones) {
                row[j] = RingValue(1);
            }
            share(&RingMatrix::row_vector(row), 1000 + i)
        })
        .collect();
    let out = run_two_party(&RunConfig::seeded(12), |s| {
        masks.iter().map(|p| apply_dp_perturbation(s, &pick(s, p), 0.01)).collect::<sparse_pi::Result<Vec<_>>>()
    })
    .map_err(err)?;
    let mut mean = 0.0;
    for (a, b) in out.outputs[0].iter().zip(&out.outputs[1]) {
        let m = reconstruct(a, b).map_err(err)?;
        mean += 1.0 - m.data().iter().filter(|v| v.0 == 1).count() as f64 / n as f64;
    }
    let effective = 100.0 * mean / trials as f64;
    ensure!((effective - 71.7).abs() <= 3.0, "effective sparsity {effective:.2}% at ε=0.01");

    // superset masks leave the outputs unchanged
    let codec = FixedPointCodec::default();
    let model = ModelWeights::random(&ModelConfig::toy(), 31).map_err(err)?.encode(&codec).map_err(err)?;
    let prompt = random_prompt(model.config.vocab, 16, 31);
    let base = RunMode { sparsity: SparsitySource::Oracle, ..RunMode::default() };
    let off = run_inference(&model, &prompt, 4, &base, &RunConfig::seeded(2)).map_err(err)?;
    let on = run_inference(&model, &prompt, 4, &RunMode { dp_epsilon: 0.01, ..base }, &RunConfig::seeded(2)).map_err(err)?;
    let nnz = |o: &sparse_pi::engine::InferenceOutput| o.steps.iter().flat_map(|s| &s.layers).map(|l| l.ffn_nnz).sum::<usize>();
    ensure!(on.logits == off.logits, "DP changed the logits");
    ensure!(nnz(&on) > nnz(&off), "DP added no neurons");
    Ok(format!(
        "10^4 trials without a 1→0 flip ({flipped} 0→1 flips); ε=0.01 on an 89.4%-sparse mask → {effective:.2}% (71.7% reported); \
         toy logits identical with DP ({} vs {} active neurons)",
        nnz(&on),
        nnz(&off)
    ))
}

// ---------------------------------------------------------------- 8

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(err)?;
    pool.install(|| {
        let codec = FixedPointCodec::default();
        let cfg = ModelConfig::toy();
        ensure!((cfg.hidden, cfg.heads, cfg.ffn, cfg.layers) == (256, 8, 1024, 2), "toy dims changed");
        let model = ModelWeights::random(&cfg, 1).map_err(err)?.encode(&codec).map_err(err)?;
        let prompt = random_prompt(cfg.vocab, 32, 1);
        let rc = RunConfig::seeded(1);
        let dense = run_inference(&model, &prompt, 8, &RunMode::dense(), &rc).map_err(err)?;
        let oracle = RunMode { sparsity: SparsitySource::Oracle, ..RunMode::default() };
        let sparse = run_inference(&model, &prompt, 8, &oracle, &rc).map_err(err)?;
        ensure!(sparse.logits == dense.logits, "oracle-sparse logits differ from dense");
        ensure!(sparse.tokens == dense.tokens, "generated tokens differ");
        let synth = RunMode {
            sparsity: SparsitySource::Synthetic { ffn_sparsity: 0.9, mha_sparsity: 0.5, structure: MaskStructure::Column },
            ..RunMode::default()
        };
        let s = run_inference(&model, &prompt, 8, &synth, &rc).map_err(err)?;
        let reduction = dense.ledger.total_elements() as f64 / s.ledger.total_elements() as f64;
        ensure!(reduction >= 1.5, "reduction {reduction:.2}×");
        let spg = run_inference(&model, &prompt, 8, &RunMode { backend: Backend::SpGemm, ..synth }, &rc).map_err(err)?;
        ensure!(spg.ledger.total_elements() > s.ledger.total_elements(), "SpGEMM cheaper than the sparse backend");
        let secs = t.elapsed().as_secs_f64();
        ensure!(secs < 600.0, "took {secs:.0}s");
        Ok(format!(
            "oracle logits bit-identical to dense over 9 steps; synthetic (heads 0.5, neurons 0.9) {reduction:.2}× fewer elements than dense \
             ({} vs {}); ledger phases: {}; {secs:.1}s on one worker thread",
            s.ledger.total_elements(),
            dense.ledger.total_elements(),
            s.ledger.phases().filter(|(p, _)| !phase::is_offline(p)).count()
        ))
    })
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut names = Vec::new();
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no bundled scenarios");
    for p in &paths {
        let s = Scenario::load(p).map_err(err)?;
        let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
        let (_, ra, ta) = run_scenario(&s, Some(a.path())).map_err(err)?;
        let (_, rb, tb) = run_scenario(&s, Some(b.path())).map_err(err)?;
        ensure!(std::fs::read(&ra).map_err(err)? == std::fs::read(&rb).map_err(err)?, "{} report differs", s.name);
        ensure!(std::fs::read(&ta).map_err(err)? == std::fs::read(&tb).map_err(err)?, "{} trace differs", s.name);
        names.push(s.name);
    }
    Ok(format!("byte-identical report.csv and trace.csv on repeat: {}", names.join(", ")))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "protocol correctness", protocol_correctness),
        (2, "shuffle cost", shuffle_cost),
        (3, "SOMM partition optimality", somm_oracle),
        (4, "SIMM row reuse", simm_properties),
        (5, "counting-mode ratios", counting_reproduction),
        (6, "KV cache strategies", kv_cache),
        (7, "differential privacy", dp_suite),
        (8, "end-to-end fidelity", end_to_end),
        (9, "determinism", determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS — {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL — {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
