//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use perception_core::correction::{
    correct_sentence, correct_sentence_observed, sample_candidates, select_reference_context, FnModel,
    CorrectionParams, ReferenceContext,
};
use perception_core::corpus::Corpus;
use perception_core::features::{NumericCovariate as Cov, SaliencyMap, Sentence, TokenContext};
use perception_core::model::fit::{ratings_of, Problem};
use perception_core::model::fitted::blank_context;
use perception_core::model::{
    fit, CategoricalCovariate, Design, FitOptions, FittedPerceptionModel, Grouping, ModelSpec, SelectOptions,
    Smoothing, Term,
};
use perception_core::plan::{
    make_study_plan, random_saliencies, ItemKind, StudyMode, StudyPlan, TRAPS_PER_PARTICIPANT,
};
use perception_core::records::{read_csv, read_jsonl, RatingRecord, VisualizationCondition};
use perception_core::render::{saliency_to_rgb, RenderSpec};
use perception_core::simulate::{simulate_ratings, GroundTruthModel, SimulationConfig, DEFAULT_CUT_POINTS};
use perception_service::{StudyDefinition, Service};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn simulate(gt: &GroundTruthModel, corpus: &Corpus, participants: usize, seed: u64) -> Vec<RatingRecord> {
    let plan = make_study_plan(
        &corpus.sentences,
        participants,
        StudyMode::SingleCondition(VisualizationCondition::Saliency),
        seed,
    )
    .unwrap();
    simulate_ratings(gt, &plan, corpus, &SimulationConfig::new(seed)).unwrap().records
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let records = simulate(&GroundTruthModel::nonlinear(), &Corpus::toy().take(30), 20, 4);
    let f = Smoothing::Fixed(0.7);
    let spec = ModelSpec::new(vec![
        Term::smooth_k(Cov::Saliency, 8, f),
        Term::smooth_k(Cov::WordLength, 6, f),
        Term::factor(CategoricalCovariate::Capitalization),
        Term::tensor(Cov::Saliency, Cov::WordPosition, f),
        Term::random_intercept(Grouping::Worker, f),
        Term::random_slope(Grouping::Worker, f),
        Term::random_intercept(Grouping::Sentence, f),
    ]);
    let design = Design::build(&records, &spec).unwrap();
    let rows = design.rows(&records);
    let ratings = ratings_of(&records);
    let subset: Vec<usize> = (0..records.len()).collect();
    let lambdas = design.initial_lambdas(0.7);
    let problem = Problem::new(&design, &rows, &ratings, &subset, &lambdas);
    let (p, q) = (design.num_coefficients, design.num_categories - 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = DVector::from_fn(p + q, |i, _| if i < p { rng.random_range(-0.5..0.5) } else { rng.random_range(-1.0..1.0) });
        let g = problem.evaluate(&x, false).unwrap().gradient;
        for j in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let fd = (problem.value(&xp) - problem.value(&xm)) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1.0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 30.0,
        format!("50 points x {} params, max relative error {worst:.3e} (< 1e-5), {secs:.1} s (< 30 s)", p + q),
    )
}

fn oracle_recovery() -> Outcome {
    let start = Instant::now();
    let truth = GroundTruthModel::oracle();
    let corpus = Corpus::toy();
    let mut records = simulate(&truth, &corpus, 10_000usize.div_ceil(corpus.sentences.len()), 21);
    records.truncate(10_000);
    let spec = ModelSpec::new(vec![
        Term::smooth(Cov::Saliency),
        Term::smooth(Cov::WordLength),
        Term::smooth(Cov::DisplayIndex),
    ]);
    let opts = FitOptions { select: SelectOptions { seed: 5, ..SelectOptions::default() }, ..FitOptions::default() };
    let model = match fit(&records, &spec, &opts) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("fit failed: {e}")),
    };
    let mut corrs = Vec::new();
    for label in model.smooth_labels() {
        let cov = model.smooth_covariate(&label).unwrap();
        let grid = model.smooth_grid(&label, 50).unwrap();
        let pe = model.partial_effect(&label, &grid).unwrap();
        let t: Vec<f64> = grid.iter().map(|&x| truth.effect(cov, x)).collect();
        corrs.push((label, pearson(&pe.values, &t)));
    }
    // Both parameterisations pin the first cut point at -1 and carry an intercept.
    let cut_err = model.cut_points.iter().zip(DEFAULT_CUT_POINTS).map(|(c, t)| (c - t).abs()).fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let min_corr = corrs.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = corrs.iter().map(|(l, c)| format!("{l} {c:.4}")).collect();
    outcome(
        min_corr >= 0.95 && cut_err <= 0.25 && secs < 600.0 && corrs.len() == 3,
        format!(
            "{} records, correlations [{}] (>= 0.95), max cut point error {cut_err:.3} (<= 0.25), {secs:.1} s (< 600 s)",
            records.len(),
            listed.join(", ")
        ),
    )
}

fn synthetic_corpus(n: usize) -> Corpus {
    const WORDS: [&str; 12] =
        ["the", "service", "was", "absolutely", "slow", "and", "staff", "friendly", "but", "prices", "high", "overall"];
    let sentences = (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..4 + i % 5).map(|j| WORDS[(i * 7 + j * 5) % WORDS.len()]).collect();
            Sentence::from_words(format!("syn-{i:03}"), &words)
        })
        .collect();
    Corpus { sentences, lexicons: Corpus::toy().lexicons }
}

fn averaging() -> Outcome {
    let corpus = synthetic_corpus(150);
    let records = simulate(&GroundTruthModel::nonlinear(), &corpus, 50, 8);
    let f = Smoothing::Fixed(1.0);
    let spec = ModelSpec::new(vec![
        Term::smooth_k(Cov::Saliency, 8, f),
        Term::smooth_k(Cov::WordLength, 6, f),
        Term::random_intercept(Grouping::Worker, f),
        Term::random_slope(Grouping::Worker, f),
        Term::random_intercept(Grouping::Sentence, f),
    ]);
    let model = fit(&records, &spec, &FitOptions::default()).unwrap();
    let (nw, nv) = (model.workers().len(), model.sentences().len());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r = &records[rng.random_range(0..records.len())];
        let s = rng.random::<f64>();
        let mut acc = 0.0;
        for w in model.workers() {
            for v in model.sentences() {
                acc += model.predict_latent(s, &r.context, Some(w), Some(v));
            }
        }
        let literal = acc / (nw * nv) as f64;
        worst = worst.max((model.predict_latent_averaged(s, &r.context) - literal).abs());
    }
    outcome(
        nw == 50 && nv == 150 && worst <= 1e-10,
        format!("|W|={nw}, |V|={nv}, 20 contexts, max |fast - literal| {worst:.2e} (<= 1e-10)"),
    )
}

fn stub_reference() -> ReferenceContext {
    ReferenceContext { context: blank_context(), sample_count: 1, seed: 0, probe_saliency: 0.5, latent: 0.0, candidate: 0 }
}

/// Smallest removed percentage over the 20 sentences and the number of
/// updates that left [0,1].
fn stub_correction_run(corpus: &Corpus, map_of: impl Fn(usize, &Sentence) -> SaliencyMap) -> (f64, usize) {
    let offset = |x: &TokenContext| if x.word_position == 0.0 { 0.0 } else { 0.25 * (1.7 * x.word_position).sin() };
    let model = FnModel(move |s: f64, x: &TokenContext| s + offset(x));
    let params = CorrectionParams { alpha: 0.05, n_steps: 100 };
    let mut min_removed = f64::INFINITY;
    let mut out_of_range = 0usize;
    for (k, sentence) in corpus.sentences.iter().enumerate() {
        let map = map_of(k, sentence);
        let result =
            correct_sentence_observed(&model, sentence, &map, &stub_reference(), params, 1, &corpus.lexicons, |ev| {
                out_of_range += usize::from(!(0.0..=1.0).contains(&ev.after));
            })
            .unwrap();
        min_removed = min_removed.min(result.report.removed_percent);
    }
    (min_removed, out_of_range)
}

fn correction_efficacy() -> Outcome {
    let start = Instant::now();
    let corpus = Corpus::toy().take(20);
    // Offsets are at most 0.25, so maps inside [0.25, 0.75] have every
    // corrected target inside [0,1].
    let (min_removed, out_of_range) = stub_correction_run(&corpus, |k, sentence| {
        let mut rng = ChaCha8Rng::seed_from_u64(99 + k as u64);
        SaliencyMap::new(sentence.id.clone(), (0..sentence.len()).map(|_| rng.random_range(0.25..=0.75)).collect())
    });
    let secs = start.elapsed().as_secs_f64();
    let (full_min, full_out) = stub_correction_run(&corpus, |k, sentence| random_saliencies(sentence, k, 99));
    outcome(
        min_removed >= 90.0 && out_of_range == 0 && full_out == 0 && secs < 60.0,
        format!(
            "20 sentences, min removed {min_removed:.2}% (>= 90%), {out_of_range} updates outside [0,1], {secs:.2} s (< 60 s); \
             full-range maps where the clamp binds: min removed {full_min:.2}%, {full_out} updates outside [0,1]"
        ),
    )
}

fn fit_word_length_model() -> (FittedPerceptionModel, Corpus) {
    let corpus = Corpus::toy();
    let records = simulate(&GroundTruthModel::word_length_inflation(), &corpus, 60, 31);
    let f = Smoothing::Select;
    let spec = ModelSpec::new(vec![
        Term::smooth_k(Cov::Saliency, 8, f),
        Term::smooth_k(Cov::WordLength, 6, f),
        Term::random_intercept(Grouping::Worker, f),
        Term::random_intercept(Grouping::Sentence, f),
    ]);
    let opts = FitOptions { select: SelectOptions { seed: 3, ..SelectOptions::default() }, ..FitOptions::default() };
    (fit(&records, &spec, &opts).unwrap(), corpus)
}

fn sign_pattern(model: &FittedPerceptionModel, corpus: &Corpus) -> Outcome {
    let x_ref = select_reference_context(model, model.covariate_space(), 10001, 0.5, 12).unwrap();
    let ref_len = x_ref.context.word_length;
    let (mut long_ok, mut long_n, mut short_ok, mut short_n) = (0, 0, 0, 0);
    for (k, sentence) in corpus.sentences.iter().enumerate() {
        let map = random_saliencies(sentence, k, 5);
        let c = correct_sentence(model, sentence, &map, &x_ref, CorrectionParams::default(), 1, &corpus.lexicons).unwrap();
        for (i, token) in sentence.tokens.iter().enumerate() {
            let len = token.surface.chars().count() as f64;
            let (before, after) = (map.scores[i], c.corrected.scores[i]);
            if len >= ref_len + 2.0 && before >= 0.5 {
                long_n += 1;
                long_ok += usize::from(after < before);
            } else if len <= ref_len - 2.0 && before < 1.0 {
                short_n += 1;
                short_ok += usize::from(after > before);
            }
        }
    }
    outcome(
        long_n > 0 && short_n > 0 && long_ok == long_n && short_ok == short_n,
        format!(
            "reference word length {ref_len:.2}; long high-saliency tokens decreased {long_ok}/{long_n}, short tokens increased {short_ok}/{short_n}"
        ),
    )
}

fn colors() -> Outcome {
    let half = saliency_to_rgb(0.5);
    let quarter = saliency_to_rgb(0.25);
    let exact = (half.r, half.g, half.b) == (255, 127, 127) && (quarter.r, quarter.g, quarter.b) == (255, 191, 191);
    let levels: Vec<u8> = (0..=255).map(|k| saliency_to_rgb(k as f64 / 255.0).g).collect();
    let monotone = levels.windows(2).all(|w| w[1] < w[0]);
    outcome(
        exact && monotone,
        format!("0.5 -> {half}, 0.25 -> {quarter}; 256 levels strictly monotone: {monotone}"),
    )
}

fn reference_determinism(model: &FittedPerceptionModel) -> Outcome {
    let runs: Vec<ReferenceContext> =
        (0..5).map(|_| select_reference_context(model, model.covariate_space(), 10001, 0.5, 42).unwrap()).collect();
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let space = model.covariate_space();
    let monotone = FnModel(|_: f64, x: &TokenContext| 0.7 * x.word_length);
    let mut middle = 0;
    for seed in 0..20 {
        let cands = sample_candidates(space, 3, seed);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| cands[a].word_length.total_cmp(&cands[b].word_length));
        let r = select_reference_context(&monotone, space, 3, 0.5, seed).unwrap();
        middle += usize::from(r.candidate == order[1]);
    }
    outcome(
        identical && middle == 20,
        format!("n=10001: 5 runs identical {identical} (candidate {}); n=3 middle candidate chosen {middle}/20", runs[0].candidate),
    )
}

fn plan_violations(plan: &StudyPlan, n: usize) -> usize {
    let mut bad = 0;
    for p in &plan.participants {
        let traps: Vec<usize> = p.items.iter().enumerate().filter(|(_, i)| i.is_trap()).map(|(k, _)| k).collect();
        bad += usize::from(traps.len() != TRAPS_PER_PARTICIPANT || p.trap_positions.len() != TRAPS_PER_PARTICIPANT);
        bad += traps.iter().filter(|&&k| p.items[..k].iter().filter(|i| !i.is_trap()).count() < n / 3).count();
        let mut order = p.sentence_order.clone();
        order.sort_unstable();
        bad += usize::from(order != (0..n).collect::<Vec<_>>());
        let shown: Vec<&str> = p
            .items
            .iter()
            .filter_map(|i| match &i.kind {
                ItemKind::Sentence { sentence_id } => Some(sentence_id.as_str()),
                ItemKind::Trap { .. } => None,
            })
            .collect();
        let expected: Vec<&str> = p.sentence_order.iter().map(|&i| plan.sentence_ids[i].as_str()).collect();
        bad += usize::from(shown != expected);
    }
    bad
}

fn protocol() -> Outcome {
    let sentences = |n: usize| -> Vec<Sentence> {
        (0..n).map(|i| Sentence::from_words(format!("s{i}"), &["one", "two", "three"])).collect()
    };
    let (within, single) = (sentences(150), sentences(37));
    let mut violations = 0;
    let mut unbalanced = 0;
    for seed in 0..1000u64 {
        let plan = make_study_plan(&within, 60, StudyMode::WithinSubject, seed).unwrap();
        violations += plan_violations(&plan, 150);
        let mut orderings = [0usize; 6];
        for p in &plan.participants {
            orderings[p.ordering.unwrap()] += 1;
            for c in VisualizationCondition::ALL {
                unbalanced += usize::from(p.items.iter().filter(|i| !i.is_trap() && i.condition == c).count() != 50);
            }
        }
        unbalanced += usize::from(orderings != [10; 6]);
        let plan =
            make_study_plan(&single, 4, StudyMode::SingleCondition(VisualizationCondition::Saliency), seed).unwrap();
        violations += plan_violations(&plan, 37);
    }
    outcome(
        violations == 0 && unbalanced == 0,
        format!("1000 within-subject plans (150 sentences, 60 participants) and 1000 single-condition plans: {violations} trap/permutation violations, {unbalanced} balance violations"),
    )
}

/// Runs the service in-process on a background runtime.
fn start_service(dir: &Path, defs: Vec<StudyDefinition>) -> (String, tokio::runtime::Runtime) {
    let service = Service::open(dir, defs).unwrap();
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(perception_service::serve(listener, service));
    (base, rt)
}

fn export_filters() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut sentences = vec![
        Sentence::from_words("len-20", &["abcdefghijklmnopqrst", "ok"]),
        Sentence::from_words("len-19", &["abcdefghijklmnopqrs", "ok"]),
    ];
    sentences.extend(Corpus::toy().take(28).sentences);
    let corpus = Corpus { sentences, lexicons: Corpus::toy().lexicons };
    let plan =
        make_study_plan(&corpus.sentences, 8, StudyMode::SingleCondition(VisualizationCondition::Saliency), 2).unwrap();
    let def = StudyDefinition { id: "filters".into(), plan: plan.clone(), corpus, render: RenderSpec::default() };
    let (base, _rt) = start_service(dir.path(), vec![def]);
    let client = reqwest::blocking::Client::new();
    // Worker 0 always takes 60 s, worker 1 just under, the rest a few seconds.
    let seconds = |w: usize| match w {
        0 => 60.0,
        1 => 59.999,
        _ => 3.0 + w as f64,
    };
    for w in 0..8 {
        let s: Value =
            client.post(format!("{base}/studies/filters/sessions")).json(&json!({ "worker_id": format!("w{w}") })).send().unwrap().json().unwrap();
        let id = s["session_id"].as_str().unwrap().to_string();
        loop {
            let next: Value = client.get(format!("{base}/sessions/{id}/next")).send().unwrap().json().unwrap();
            if next["done"].as_bool().unwrap() {
                break;
            }
            let index = next["item"]["item_index"].as_u64().unwrap() as usize;
            let item = &plan.participants[w].items[index];
            let rating = match &item.kind {
                ItemKind::Trap { expected_rating, .. } => *expected_rating,
                ItemKind::Sentence { .. } => 1 + (item.scores[item.target_token] * 6.99) as u8,
            };
            let ack = client
                .post(format!("{base}/sessions/{id}/ratings"))
                .json(&json!({ "item_index": index, "rating": rating, "completion_time_s": seconds(w) }))
                .send()
                .unwrap();
            if !ack.status().is_success() {
                return outcome(false, format!("rating rejected: {}", ack.text().unwrap()));
            }
        }
    }
    let export = |q: &str| client.get(format!("{base}/studies/filters/export?{q}")).send().unwrap().text().unwrap();
    let all = read_csv(export("format=csv").as_bytes()).unwrap();
    let csv = export("format=csv");
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (len_c, ct_c, wl_c, ct_v) = (col("len_outlier"), col("ct_outlier"), col("word_length"), col("completion_time_s"));
    let mut wrong_flags = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let wl: f64 = f[wl_c].parse().unwrap();
        let ct: f64 = f[ct_v].parse().unwrap();
        wrong_flags += usize::from((f[len_c] == "true") != (wl >= 20.0));
        wrong_flags += usize::from((f[ct_c] == "true") != (ct >= 60.0));
    }
    let filtered = read_jsonl(export("format=jsonl&paper-filters=true").as_bytes()).unwrap();
    let leaked = filtered.iter().filter(|r| r.context.word_length >= 20.0 || r.completion_time_s >= 60.0).count();
    let expected_kept = all.iter().filter(|r| r.context.word_length < 20.0 && r.completion_time_s < 60.0).count();
    let long_19_kept = filtered.iter().any(|r| r.context.word_length == 19.0);
    let jsonl_all = read_jsonl(export("format=jsonl").as_bytes()).unwrap();
    let spec = ModelSpec::new(vec![Term::smooth_k(Cov::Saliency, 6, Smoothing::Fixed(1.0))]);
    let round_trip = fit(&filtered, &spec, &FitOptions::default()).map(|m| m.report.converged).unwrap_or(false);
    outcome(
        wrong_flags == 0 && leaked == 0 && filtered.len() == expected_kept && long_19_kept && jsonl_all == all && round_trip,
        format!(
            "{} records, {wrong_flags} wrong flags, {} kept under filters ({leaked} offending leaked, 19-char word kept {long_19_kept}), csv == jsonl {}, fit after export converged {round_trip}",
            all.len(),
            filtered.len(),
            jsonl_all == all
        ),
    )
}

struct ServeProcess {
    child: Child,
    base: String,
}

fn spawn_serve(dir: &Path) -> ServeProcess {
    let mut child = Command::new(env!("CARGO_BIN_EXE_perception"))
        .args(["serve", "--seed", "9", "--participants", "20", "--mode", "saliency", "--sentences", "12"])
        .args(["--addr", "127.0.0.1:0", "--data-dir"])
        .arg(dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).expect("listening line");
    ServeProcess { child, base: format!("http://{}", v["addr"].as_str().unwrap()) }
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let client = reqwest::blocking::Client::builder().timeout(Duration::from_secs(20)).build().unwrap();
    let mut acked: Vec<(String, u64)> = Vec::new();
    let mut survived = 0;
    for trial in 0..10 {
        let mut server = spawn_serve(dir.path());
        let s: Value = client
            .post(format!("{}/studies/study/sessions", server.base))
            .json(&json!({ "worker_id": format!("trial-{trial}") }))
            .send()
            .unwrap()
            .json()
            .unwrap();
        let id = s["session_id"].as_str().unwrap().to_string();
        let rating = 1 + trial % 7;
        let ack = client
            .post(format!("{}/sessions/{id}/ratings", server.base))
            .json(&json!({ "item_index": 0, "rating": rating, "completion_time_s": 2.0 + trial as f64 }))
            .send()
            .unwrap();
        let ok = ack.status().is_success();
        // SIGKILL right after the acknowledgement arrives.
        server.child.kill().unwrap();
        server.child.wait().unwrap();
        if ok {
            acked.push((format!("trial-{trial}"), rating));
        }

        let mut restarted = spawn_serve(dir.path());
        let session: Value =
            client.get(format!("{}/sessions/{id}", restarted.base)).send().unwrap().json().unwrap();
        let jsonl = client.get(format!("{}/studies/study/export?format=jsonl", restarted.base)).send().unwrap().text().unwrap();
        let records = read_jsonl(jsonl.as_bytes()).unwrap();
        let present = |(worker, r): &(String, u64)| {
            records.iter().any(|rec| &rec.worker_id == worker && rec.context.display_index == 1.0 && u64::from(rec.rating) == *r)
        };
        if ok && session["cursor"] == 1 && acked.iter().all(present) && records.len() == acked.len() {
            survived += 1;
        }
        restarted.child.kill().unwrap();
        restarted.child.wait().unwrap();
    }
    outcome(survived == 10, format!("{survived}/10 acknowledged ratings present after SIGKILL and restart (10/10 required)"))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report("gradient correctness", gradient());
    report("oracle recovery", oracle_recovery());
    report("averaging equivalence", averaging());
    report("correction efficacy", correction_efficacy());
    let (model, corpus) = fit_word_length_model();
    report("correction sign pattern", sign_pattern(&model, &corpus));
    report("color exactness", colors());
    report("reference-context determinism", reference_determinism(&model));
    report("protocol invariants", protocol());
    report("export filter fidelity", export_filters());
    report("durability", durability());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
