//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use echelon::baseline::{
    aggregate_company, exact_shapley, explain_central, kernel_shap, train_central, FnRegressor,
    ShapConfig,
};
use echelon::cli::{cmd_run_decentralised, cmd_synth, RANKING_FILE};
use echelon::config::{RunConfig, Transport};
use echelon::dataset::{
    aggregate_quality, generate_synthetic, CorrelationScope, MeasurementBlock, MetricSeries,
    SyntheticSpec, NOISE_ACTOR_ID,
};
use echelon::ensemble::{summarise, EnsembleHyper, Layout, Member, Mode};
use echelon::evaluation::{compare, kendall_tau};
use echelon::protocol::{
    actor_seed, decode_message, encode_message, noise_actor, run_campaign, serve_actor, ActorLink,
    ActorPolicy, CallForUncertainty, CampaignConfig, CampaignOutcome, ContributionRanking, Decline,
    Direction, InProcessLink, LocalActor, Message, TcpLink, UncertaintyResponse,
};

const FIXTURE_SEEDS: u64 = 10;
const FIXTURE_ROWS: usize = 5000;
const FIXTURE_WEIGHTS: [f64; 4] = [3.0, 2.0, 1.0, 0.5];
const DOWNSTREAM: &str = "actor-4";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(started: Instant, budget: Duration) -> (bool, String) {
    let t = started.elapsed();
    (t < budget, format!("{:.1}s of {}s", t.as_secs_f64(), budget.as_secs()))
}

fn gradient_check() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let layout = Layout {
            inputs: rng.gen_range(1..=6),
            hidden: rng.gen_range(1..=8),
        };
        let rows = rng.gen_range(1..=6);
        let member = Member::init(layout, case, 0.3, (-10.0, 10.0)).unwrap();
        let xs: Vec<f64> = (0..rows * layout.inputs).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Half of the cases use a fixed dropout mask.
        let masks: Option<Vec<f64>> = (case % 2 == 1).then(|| {
            (0..rows * layout.hidden)
                .map(|_| if rng.gen_bool(0.7) { 1.0 / 0.7 } else { 0.0 })
                .collect()
        });
        let masks = masks.as_deref();
        let (_, grad) = member.loss_and_gradient(&xs, &ys, masks).unwrap();
        let h = 1e-5;
        for k in 0..grad.len() {
            let mut plus = member.clone();
            plus.params_mut()[k] += h;
            let mut minus = member.clone();
            minus.params_mut()[k] -= h;
            let fd = (plus.loss_and_gradient(&xs, &ys, masks).unwrap().0
                - minus.loss_and_gradient(&xs, &ys, masks).unwrap().0)
                / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs());
            if scale > 1e-8 {
                worst = worst.max((fd - grad[k]).abs() / scale);
            }
        }
    }
    let (fast, time) = within_budget(started, Duration::from_secs(10));
    verdict(
        worst < 1e-4 && fast,
        format!("50 layouts, max relative error {worst:.2e} (< 1e-4), {time}"),
    )
}

fn mixture_oracle() -> Verdict {
    let started = Instant::now();
    let draws = 1_000_000usize;
    let mut misses = 0;
    let mut worst_z: f64 = 0.0;
    for set in 0..100u64 {
        let m = [2, 5, 10][(set % 3) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + set);
        let mus: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let vars: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..2.0)).collect();
        let total = summarise(&mus, &vars).total_variance;

        let sds: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
        let samples: Vec<f64> = (0..draws)
            .map(|_| {
                let c = rng.gen_range(0..m);
                let z: f64 = StandardNormal.sample(&mut rng);
                mus[c] + sds[c] * z
            })
            .collect();
        let n = draws as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let (mut m2, mut m4) = (0.0, 0.0);
        for s in &samples {
            let d2 = (s - mean) * (s - mean);
            m2 += d2;
            m4 += d2 * d2;
        }
        let var = m2 / (n - 1.0);
        let se = ((m4 / n - (m2 / n) * (m2 / n)) / n).sqrt();
        let z = (total - var).abs() / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            misses += 1;
        }
    }
    let (fast, time) = within_budget(started, Duration::from_secs(60));
    verdict(
        misses == 0 && fast,
        format!("100 sets, {misses} outside 3 SE (largest |z| = {worst_z:.2}), {time}"),
    )
}

fn quality_desk_checks() -> Verdict {
    let q = |parts, types, a: &[f64], s: &[f64]| {
        aggregate_quality(&MeasurementBlock {
            parts,
            types,
            actuals: a.to_vec(),
            setpoints: s.to_vec(),
        })
        .unwrap()
    };
    let zero = q(2, 2, &[1.5, 3.0, 1.5, 3.0], &[1.5, 3.0, 1.5, 3.0]);
    let tenth = q(1, 2, &[1.1, 0.9], &[1.0, 1.0]);
    let two = q(2, 1, &[2.0, 0.0], &[1.0, 1.0]);
    // 1.1 and 0.9 are not representable, so 0.1 holds to within rounding.
    let ok = zero == 0.0 && (tenth - 0.1).abs() <= 4.0 * f64::EPSILON * 0.1 && two == 2.0;
    verdict(ok, format!("got {zero}, {tenth}, {two}; expected 0, 0.1, 2"))
}

fn kernel_shap_oracle() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut worst_phi, mut worst_local): (f64, f64) = (0.0, 0.0);
    for model_idx in 0..20u64 {
        let d = rng.gen_range(2..=8);
        let member = Member::init(Layout { inputs: d, hidden: 6 }, 500 + model_idx, 0.0, (-10.0, 10.0)).unwrap();
        let model = FnRegressor::new(d, move |x: &[f64]| member.forward(x, Mode::Eval).unwrap().0);
        let background: Vec<f64> = (0..20 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for i in 0..5u64 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let exact = exact_shapley(&model, &x, &background).unwrap();
            let approx = kernel_shap(&model, &x, &background, 4096, model_idx * 10 + i).unwrap();
            for (a, e) in approx.phi.iter().zip(&exact.phi) {
                worst_phi = worst_phi.max((a - e).abs());
            }
            let sum: f64 = approx.phi.iter().sum::<f64>() + approx.base_value;
            worst_local = worst_local.max((sum - approx.prediction).abs());
        }
    }
    let (fast, time) = within_budget(started, Duration::from_secs(300));
    verdict(
        worst_phi < 1e-2 && worst_local < 1e-3 && fast,
        format!("20 models x 5 instances, max |phi error| {worst_phi:.2e} (< 1e-2), local accuracy {worst_local:.2e} (< 1e-3), {time}"),
    )
}

fn fixture_hyper() -> EnsembleHyper {
    EnsembleHyper {
        member_count: 5,
        max_epochs: 500,
        ..EnsembleHyper::default()
    }
}

fn fixture(seed: u64, cross_correlation: f64) -> SyntheticSpec {
    SyntheticSpec {
        actor_count: 4,
        features_per_actor: 1,
        signal_weights: FIXTURE_WEIGHTS.to_vec(),
        noise_std: 0.5,
        row_count: FIXTURE_ROWS,
        cross_correlation,
        correlation_scope: CorrelationScope::Only(vec![3]),
        seed,
    }
}

fn campaign(spec: &SyntheticSpec, seed: u64) -> (CampaignOutcome, echelon::dataset::SyntheticData) {
    let data = generate_synthetic(spec).unwrap();
    let links: Vec<Arc<dyn ActorLink>> = data
        .actors
        .iter()
        .map(|a| {
            let policy = ActorPolicy {
                base_seed: actor_seed(seed, a.actor_id()),
                min_overlap: 50,
                participate: true,
            };
            Arc::new(InProcessLink::new(LocalActor::new(a.clone(), policy))) as Arc<dyn ActorLink>
        })
        .collect();
    let config = CampaignConfig {
        seed,
        ..CampaignConfig::default()
    };
    let outcome = run_campaign(&links, &data.metric, None, &fixture_hyper(), &config).unwrap();
    (outcome, data)
}

fn fmt_ranking(r: &ContributionRanking) -> String {
    r.entries
        .iter()
        .map(|e| format!("{}={:.3}", e.actor_id, e.total_uncertainty))
        .collect::<Vec<_>>()
        .join(" ")
}

struct FixtureRuns {
    plain: Vec<(CampaignOutcome, echelon::dataset::SyntheticData)>,
    elapsed: Duration,
}

fn run_plain_fixture() -> FixtureRuns {
    let started = Instant::now();
    let plain = (1..=FIXTURE_SEEDS)
        .map(|seed| {
            let run = campaign(&fixture(seed, 0.0), seed);
            eprintln!("  seed {seed}: {}", fmt_ranking(&run.0.ranking));
            run
        })
        .collect();
    FixtureRuns {
        plain,
        elapsed: started.elapsed(),
    }
}

fn noise_floor(runs: &FixtureRuns) -> Verdict {
    let highest = runs
        .plain
        .iter()
        .filter(|(o, _)| o.ranking.entries.last().is_some_and(|e| e.actor_id == NOISE_ACTOR_ID))
        .count();
    let budget = Duration::from_secs(15 * 60);
    verdict(
        highest >= 9 && runs.elapsed < budget,
        format!(
            "noise highest in {highest}/{FIXTURE_SEEDS} seeds (>= 9), {:.1}s of {}s",
            runs.elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn ranking_agreement(runs: &FixtureRuns) -> Verdict {
    let mut taus = Vec::new();
    for (seed, (outcome, data)) in (1..=FIXTURE_SEEDS).zip(&runs.plain) {
        let ids: Vec<String> = data.metric.part_ids().map(String::from).collect();
        let mut actors = data.actors.clone();
        actors.push(noise_actor(&ids, 5, actor_seed(seed, NOISE_ACTOR_ID)).unwrap());
        let model = train_central(&actors, &data.metric, &fixture_hyper(), seed, 100).unwrap();
        let report = explain_central(&model, &ShapConfig::default(), seed).unwrap();
        let importance = aggregate_company(&report, model.feature_index()).unwrap();
        let cmp = compare(&outcome.ranking, &importance).unwrap();
        let real: Vec<_> = cmp.rows.iter().filter(|r| r.actor_id != NOISE_ACTOR_ID).collect();
        let dec: Vec<f64> = real.iter().map(|r| -r.uncertainty).collect();
        let shap: Vec<f64> = real.iter().map(|r| r.shap).collect();
        let tau = kendall_tau(&dec, &shap).unwrap();
        eprintln!("  seed {seed}: tau {tau:.3} (with noise {:.3})", cmp.kendall_tau);
        taus.push(tau);
    }
    let med = median(&taus);
    verdict(
        med >= 0.6,
        format!("median Kendall tau over actors {med:.3} (>= 0.6), per seed {}", fmt_list(&taus)),
    )
}

fn multicollinearity_probe(runs: &FixtureRuns) -> Verdict {
    let mut improved = 0;
    let mut moves = Vec::new();
    for (seed, (plain, _)) in (1..=FIXTURE_SEEDS).zip(&runs.plain) {
        let (mixed, _) = campaign(&fixture(seed, 0.8), seed);
        let before = plain.ranking.rank_of(DOWNSTREAM).unwrap();
        let after = mixed.ranking.rank_of(DOWNSTREAM).unwrap();
        eprintln!("  seed {seed}: {}", fmt_ranking(&mixed.ranking));
        if after < before {
            improved += 1;
        }
        moves.push(format!("{before}->{after}"));
    }
    verdict(
        improved * 2 > FIXTURE_SEEDS,
        format!(
            "{DOWNSTREAM} rank improved in {improved}/{FIXTURE_SEEDS} seeds (majority needed): {}",
            moves.join(" ")
        ),
    )
}

fn small_config(dir: &Path, seed: u64, transport: Transport) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(&format!(
        r#"
        seed = {seed}
        [synthetic]
        actor_count = 3
        features_per_actor = 2
        signal_weights = [2.0, 1.0, 0.5]
        noise_std = 0.5
        row_count = 600
        seed = {seed}
        [ensemble]
        member_count = 3
        hidden_size = 16
        max_epochs = 40
        patience_epochs = 10
        "#
    ))
    .unwrap();
    cfg.data_dir = Some(dir.join("data"));
    cfg.out_dir = Some(dir.join("data"));
    cmd_synth(&cfg).unwrap();
    cfg.out_dir = Some(dir.join("out"));
    cfg.transport = transport;
    cfg
}

fn message_round_trips() -> Result<(), String> {
    let metric = MetricSeries::new(vec![("p1".into(), 0.25), ("p2".into(), -1.5e-7)]).unwrap();
    let messages = [
        Message::Call(CallForUncertainty {
            call_id: "call-1-0001".into(),
            metric,
            hyper: EnsembleHyper::default(),
            response_deadline: Duration::from_millis(1500),
        }),
        Message::Response(UncertaintyResponse {
            actor_id: "actor-1".into(),
            call_id: "call-1-0001".into(),
            total_uncertainty: 0.1 + 0.2,
        }),
        Message::Decline(Decline {
            actor_id: "actor-2".into(),
            call_id: "call-1-0001".into(),
        }),
    ];
    for m in &messages {
        let back = decode_message(&encode_message(m)).map_err(|e| e.to_string())?;
        if &back != m {
            return Err(format!("`{}` did not round-trip", m.kind()));
        }
    }
    Ok(())
}

fn socket_transcript() -> Result<String, String> {
    let data = generate_synthetic(&SyntheticSpec {
        actor_count: 3,
        features_per_actor: 2,
        signal_weights: vec![2.0, 1.0, 0.5],
        noise_std: 0.5,
        row_count: 600,
        cross_correlation: 0.0,
        correlation_scope: CorrelationScope::Chain,
        seed: 5,
    })
    .map_err(|e| e.to_string())?;
    let hyper = EnsembleHyper {
        member_count: 3,
        hidden_size: 16,
        max_epochs: 30,
        patience_epochs: 10,
        ..EnsembleHyper::default()
    };
    let mut links: Vec<Arc<dyn ActorLink>> = Vec::new();
    let mut servers = Vec::new();
    for (i, a) in data.actors.iter().enumerate() {
        let policy = ActorPolicy {
            base_seed: actor_seed(5, a.actor_id()),
            min_overlap: 50,
            participate: i != 1,
        };
        let actor = LocalActor::new(a.clone(), policy);
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        servers.push(thread::spawn(move || serve_actor(listener, &actor, Some(1))));
        links.push(Arc::new(TcpLink::new(a.actor_id(), addr)));
    }
    let config = CampaignConfig {
        seed: 5,
        deadline: Duration::from_secs(120),
        ..CampaignConfig::default()
    };
    let outcome = run_campaign(&links, &data.metric, None, &hyper, &config).map_err(|e| e.to_string())?;
    for s in servers {
        s.join().map_err(|_| "actor thread panicked")?.map_err(|e| e.to_string())?;
    }
    let mut scalars: BTreeMap<String, usize> = BTreeMap::new();
    for entry in &outcome.log.transcript {
        match decode_message(entry.frame.as_bytes()).map_err(|e| e.to_string())? {
            Message::Response(r) => {
                if entry.direction != Direction::FromActor || r.actor_id != entry.actor_id {
                    return Err(format!("misplaced response frame for {}", entry.actor_id));
                }
                *scalars.entry(r.actor_id).or_default() += 1;
            }
            Message::Call(_) if entry.direction == Direction::ToActor => {}
            Message::Decline(_) if entry.direction == Direction::FromActor => {}
            other => return Err(format!("unexpected `{}` frame", other.kind())),
        }
    }
    let participating = &outcome.log.responded;
    if participating.len() != 2 || outcome.log.declined != ["actor-2"] {
        return Err(format!("unexpected participation {:?}", outcome.log));
    }
    for id in participating {
        if scalars.get(id) != Some(&1) {
            return Err(format!("{id} has {:?} scalar frames", scalars.get(id)));
        }
    }
    if scalars.len() != participating.len() {
        return Err(format!("scalar frames from non-participants: {scalars:?}"));
    }
    Ok(format!(
        "{} frames, one scalar each from {}",
        outcome.log.transcript.len(),
        participating.join(", ")
    ))
}

fn transports_agree() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exe = Path::new(env!("CARGO_BIN_EXE_echelon"));
    let a = small_config(&tmp.path().join("in-process"), 3, Transport::InProcess);
    let b = small_config(&tmp.path().join("sockets"), 3, Transport::Sockets);
    let ra = cmd_run_decentralised(&a, None).map_err(|e| e.to_string())?;
    let rb = cmd_run_decentralised(&b, Some(exe)).map_err(|e| e.to_string())?;
    if ra.ranking != rb.ranking {
        return Err(format!(
            "in-process {} vs sockets {}",
            fmt_ranking(&ra.ranking),
            fmt_ranking(&rb.ranking)
        ));
    }
    Ok(())
}

fn protocol_checks() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    match message_round_trips() {
        Ok(()) => notes.push("round-trip ok for call/response/decline".to_string()),
        Err(e) => {
            pass = false;
            notes.push(e);
        }
    }
    match socket_transcript() {
        Ok(s) => notes.push(s),
        Err(e) => {
            pass = false;
            notes.push(e);
        }
    }
    match transports_agree() {
        Ok(()) => notes.push("in-process and socket rankings identical".to_string()),
        Err(e) => {
            pass = false;
            notes.push(e);
        }
    }
    verdict(pass, notes.join("; "))
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), 8, Transport::InProcess);
    cmd_run_decentralised(&cfg, None).unwrap();
    let first = std::fs::read(tmp.path().join("out").join(RANKING_FILE)).unwrap();
    cfg.out_dir = Some(tmp.path().join("out-again"));
    cmd_run_decentralised(&cfg, None).unwrap();
    let second = std::fs::read(tmp.path().join("out-again").join(RANKING_FILE)).unwrap();
    verdict(
        !first.is_empty() && first == second,
        format!("two runs, {} vs {} bytes, identical: {}", first.len(), second.len(), first == second),
    )
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);

    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v));
    };
    if wanted(1) {
        report(1, gradient_check());
    }
    if wanted(2) {
        report(2, mixture_oracle());
    }
    if wanted(3) {
        report(3, quality_desk_checks());
    }
    if wanted(4) {
        report(4, kernel_shap_oracle());
    }
    if wanted(5) || wanted(6) || wanted(7) {
        eprintln!("fixture, cross_correlation 0:");
        let runs = run_plain_fixture();
        if wanted(5) {
            report(5, noise_floor(&runs));
        }
        if wanted(6) {
            report(6, ranking_agreement(&runs));
        }
        if wanted(7) {
            eprintln!("fixture, cross_correlation 0.8 on {DOWNSTREAM}:");
            report(7, multicollinearity_probe(&runs));
        }
    }
    if wanted(8) {
        report(8, protocol_checks());
    }
    if wanted(9) {
        report(9, determinism());
    }

    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
