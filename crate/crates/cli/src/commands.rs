use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use perception_core::correction::{
    correct_plan, correct_sentence, select_reference_context, sentence_bias, BiasReport, CorrectionParams,
    ReferenceContext, SentenceBias,
};
use perception_core::corpus::Corpus;
use perception_core::features::{NumericCovariate, SaliencyMap, Sentence, SentenceDocument};
use perception_core::model::{
    fit as fit_model, FitOptions, FittedPerceptionModel, Grouping, ModelSpec, SelectOptions, Smoothing, Term,
};
use perception_core::plan::{make_study_plan, random_saliencies, StudyMode};
use perception_core::records::{self, RatingRecord, VisualizationCondition};
use perception_core::render::{
    render_bias_strip, render_heatmap, render_map, render_partial_effect, BiasScale, RenderMode, RenderSpec,
};
use perception_core::simulate::{simulate_ratings, GroundTruthModel, SimulationConfig};
use perception_service::{export_events, read_events, ExportFormat, Service, StudyDefinition, LOG_FILE};
use serde::Serialize;

use crate::error::CliError;
use crate::{
    BiasArgs, CorpusArgs, CorrectArgs, ExportArgs, FitArgs, PartialEffectsArgs, ReferenceArgs, RenderArgs, ServeArgs,
    SimulateArgs,
};

fn need_seed(seed: Option<u64>, command: &'static str) -> Result<u64, CliError> {
    seed.ok_or(CliError::MissingSeed(command))
}

fn open_input(path: &str) -> Result<Box<dyn BufRead>, CliError> {
    if path == "-" {
        Ok(Box::new(BufReader::new(std::io::stdin())))
    } else {
        let f = std::fs::File::open(path).map_err(CliError::io(path))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn write_output(path: &str, bytes: &[u8]) -> Result<(), CliError> {
    if path == "-" {
        let mut out = std::io::stdout().lock();
        out.write_all(bytes).and_then(|_| out.flush()).map_err(CliError::io("<stdout>"))
    } else {
        write_file(Path::new(path), bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Prints a one-line JSON summary on stdout when stdout is not used for data.
fn summary(out: &str, value: serde_json::Value) {
    if out != "-" {
        println!("{value}");
    }
}

fn load_corpus(args: &CorpusArgs) -> Result<Corpus, CliError> {
    let corpus = match &args.conllu {
        Some(p) => Corpus::load(p, args.frequency.as_deref(), args.sentiment.as_deref())?,
        None if args.frequency.is_some() || args.sentiment.is_some() => {
            Corpus::with_sentences(Corpus::toy().sentences, args.frequency.as_deref(), args.sentiment.as_deref())?
        }
        None => Corpus::toy(),
    };
    Ok(match args.sentences {
        Some(n) => corpus.take(n),
        None => corpus,
    })
}

fn parse_mode(s: &str) -> Result<StudyMode, CliError> {
    VisualizationCondition::parse(s)
        .map(StudyMode::SingleCondition)
        .or_else(|| StudyMode::parse(s))
        .ok_or_else(|| CliError::Usage(format!("unknown study mode '{s}'; use saliency, corrected, bars or within")))
}

/// Within-subject plans split the sentences into three equal blocks, so the
/// trailing remainder is left out.
fn fit_corpus_to_mode(corpus: Corpus, mode: StudyMode) -> Corpus {
    let n = corpus.sentences.len();
    if mode == StudyMode::WithinSubject && !n.is_multiple_of(3) && n > 3 {
        log::warn!("within-subject mode uses the first {} of {n} sentences", n - n % 3);
        return corpus.take(n - n % 3);
    }
    corpus
}

fn load_model(path: &str) -> Result<FittedPerceptionModel, CliError> {
    let reader = open_input(path)?;
    serde_json::from_reader(reader).map_err(|e| CliError::Input(format!("model {path}: {e}")))
}

fn read_record_input(path: &str) -> Result<Vec<RatingRecord>, CliError> {
    if path == "-" {
        Ok(records::read_jsonl(open_input(path)?)?)
    } else {
        Ok(records::read_records(Path::new(path))?)
    }
}

/// Sentence documents given as one JSON object, a JSON array or JSONL.
fn read_documents(path: &Path) -> Result<Vec<SentenceDocument>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |e: serde_json::Error| CliError::Input(format!("{}: {e}", path.display()));
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(&text).map_err(bad);
    }
    if let Ok(doc) = serde_json::from_str::<SentenceDocument>(&text) {
        return Ok(vec![doc]);
    }
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(bad)).collect()
}

fn documents(input: Option<&Path>, corpus: &Corpus, seed: u64) -> Result<Vec<(Sentence, SaliencyMap)>, CliError> {
    match input {
        Some(p) => read_documents(p)?.into_iter().map(|d| Ok(d.into_parts()?)).collect(),
        None => Ok(corpus.sentences.iter().map(|s| (s.clone(), random_saliencies(s, 0, seed))).collect()),
    }
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let seed = need_seed(a.seed, "simulate")?;
    let mode = parse_mode(&a.mode)?;
    let corpus = fit_corpus_to_mode(load_corpus(&a.corpus)?, mode);
    let truth = match &a.ground_truth {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => GroundTruthModel::preset(&a.truth).ok_or_else(|| {
            CliError::Usage(format!("unknown ground truth '{}'; presets: {}", a.truth, GroundTruthModel::PRESETS.join(", ")))
        })?,
    };
    let plan = make_study_plan(&corpus.sentences, a.participants, mode, seed)?;
    let mut config = SimulationConfig::new(seed);
    config.clickers = a.clickers.iter().copied().collect();
    let sim = simulate_ratings(&truth, &plan, &corpus, &config)?;
    let failed: HashSet<String> = sim.trap_failed_workers().into_iter().collect();
    let mut bytes = Vec::new();
    if a.out.ends_with(".csv") {
        records::write_csv(&mut bytes, &sim.records, &failed)?;
    } else {
        records::write_jsonl(&mut bytes, &sim.records, &failed)?;
    }
    write_output(&a.out, &bytes)?;
    if let Some(p) = &a.plan_out {
        write_file(p, &json_bytes(&plan))?;
    }
    if let Some(p) = &a.traps_out {
        write_file(p, &json_bytes(&sim.traps))?;
    }
    summary(
        &a.out,
        serde_json::json!({ "records": sim.records.len(), "participants": a.participants, "trap_failed_workers": failed.len() }),
    );
    Ok(())
}

fn default_spec(a: &FitArgs) -> Result<ModelSpec, CliError> {
    let smoothing = a.lambda.map_or(Smoothing::Select, Smoothing::Fixed);
    let mut terms = Vec::new();
    for name in &a.smooths {
        let cov = NumericCovariate::parse(name.trim())
            .ok_or_else(|| CliError::Usage(format!("unknown covariate '{name}' in --smooths")))?;
        let k = if cov == NumericCovariate::Saliency { a.k_saliency } else { a.k };
        terms.push(Term::smooth_k(cov, k, smoothing));
    }
    if !a.no_random_effects {
        terms.push(Term::random_intercept(Grouping::Worker, smoothing));
        terms.push(Term::random_intercept(Grouping::Sentence, smoothing));
    }
    Ok(ModelSpec::new(terms))
}

fn selects(spec: &ModelSpec) -> bool {
    spec.terms.iter().any(|t| match t {
        Term::Smooth(s) => s.smoothing == Smoothing::Select,
        Term::Tensor(t) => t.smoothing.contains(&Smoothing::Select),
        Term::RandomIntercept { smoothing, .. } | Term::RandomSlope { smoothing, .. } => *smoothing == Smoothing::Select,
        Term::Factor { .. } => false,
    })
}

#[derive(Serialize)]
struct FitSummary<'a> {
    report: &'a perception_core::model::FitReport,
    lambdas: &'a [f64],
    edf: Vec<perception_core::model::TermEdf>,
    records: usize,
}

pub fn fit(a: FitArgs) -> Result<(), CliError> {
    let mut recs = read_record_input(&a.input)?;
    if a.paper_filters {
        let before = recs.len();
        recs = records::apply_filters(&recs, &HashSet::new());
        log::info!("dropped {} flagged records", before - recs.len());
    }
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => default_spec(&a)?,
    };
    let seed = if selects(&spec) { need_seed(a.seed, "fit")? } else { a.seed.unwrap_or(0) };
    let mut select = SelectOptions { folds: a.folds, seed, ..SelectOptions::default() };
    if !a.lambda_grid.is_empty() {
        select.grid = a.lambda_grid.clone();
    }
    let opts = FitOptions { max_iter: a.max_iter, tol: a.tol, select };
    let model = fit_model(&recs, &spec, &opts)?;
    if !model.report.converged {
        log::warn!("fit did not converge: {}", model.report.notes.join("; "));
    }
    let mut bytes = serde_json::to_vec(&model).map_err(|e| CliError::Input(e.to_string()))?;
    bytes.push(b'\n');
    write_output(&a.out, &bytes)?;
    if let Some(p) = &a.report {
        let s = FitSummary { report: &model.report, lambdas: &model.lambdas, edf: model.edf()?, records: recs.len() };
        write_file(p, &json_bytes(&s))?;
    }
    summary(
        &a.out,
        serde_json::json!({ "records": recs.len(), "converged": model.report.converged, "iterations": model.report.iterations }),
    );
    Ok(())
}

fn file_stem(label: &str) -> String {
    let s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

pub fn partial_effects(a: PartialEffectsArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    std::fs::create_dir_all(&a.out_dir).map_err(CliError::io(&a.out_dir))?;
    let labels = if a.terms.is_empty() { model.smooth_labels() } else { a.terms.clone() };
    let mut written = Vec::new();
    for label in &labels {
        let grid = model.smooth_grid(label, a.points)?;
        let pe = model.partial_effect(label, &grid)?;
        let mut csv = String::from("x,estimate,se,lower,upper\n");
        for i in 0..pe.grid.len() {
            csv.push_str(&format!("{},{},{},{},{}\n", pe.grid[i], pe.values[i], pe.se[i], pe.lower[i], pe.upper[i]));
        }
        let stem = file_stem(label);
        let csv_path = a.out_dir.join(format!("{stem}.csv"));
        let svg_path = a.out_dir.join(format!("{stem}.svg"));
        write_file(&csv_path, csv.as_bytes())?;
        write_file(&svg_path, render_partial_effect(&pe).as_bytes())?;
        written.push(csv_path);
        written.push(svg_path);
    }
    let mut edf = String::from("term,size,edf\n");
    for t in model.edf()? {
        edf.push_str(&format!("\"{}\",{},{}\n", t.term, t.size, t.edf));
    }
    let edf_path = a.out_dir.join("edf.csv");
    write_file(&edf_path, edf.as_bytes())?;
    written.push(edf_path);
    println!("{}", serde_json::json!({ "files": written }));
    Ok(())
}

struct Prepared {
    model: FittedPerceptionModel,
    corpus: Corpus,
    docs: Vec<(Sentence, SaliencyMap)>,
    x_ref: ReferenceContext,
}

fn prepare(r: &ReferenceArgs, command: &'static str) -> Result<Prepared, CliError> {
    let seed = need_seed(r.seed, command)?;
    let model = load_model(&r.model)?;
    let corpus = load_corpus(&r.corpus)?;
    let docs = documents(r.input.as_deref(), &corpus, seed)?;
    let x_ref = select_reference_context(&model, model.covariate_space(), r.samples, r.probe, seed)?;
    Ok(Prepared { model, corpus, docs, x_ref })
}

fn svg_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{}-{suffix}.svg", file_stem(id)))
}

#[derive(Serialize)]
struct BiasOutput<'a> {
    reference: &'a ReferenceContext,
    sentences: Vec<SentenceBias>,
}

pub fn bias(a: BiasArgs) -> Result<(), CliError> {
    let p = prepare(&a.reference, "bias")?;
    let mut sentences = Vec::new();
    for (sentence, map) in &p.docs {
        let b = sentence_bias(&p.model, sentence, map, &p.x_ref, a.reference.display_index, &p.corpus.lexicons)?;
        if let Some(dir) = &a.reference.svg_dir {
            let strip = render_bias_strip(sentence, &b, None, &RenderSpec::new(RenderMode::Bias))?;
            write_file(&svg_path(dir, &sentence.id, "bias"), strip.svg.as_bytes())?;
        }
        sentences.push(b);
    }
    let n = sentences.len();
    write_output(&a.out, &json_bytes(&BiasOutput { reference: &p.x_ref, sentences }))?;
    summary(&a.out, serde_json::json!({ "sentences": n }));
    Ok(())
}

#[derive(Serialize)]
struct CorrectionOutput<'a> {
    reference: &'a ReferenceContext,
    params: CorrectionParams,
    reports: &'a [BiasReport],
}

pub fn correct(a: CorrectArgs) -> Result<(), CliError> {
    let p = prepare(&a.reference, "correct")?;
    let params = CorrectionParams { alpha: a.alpha, n_steps: a.steps };
    let mut out = Vec::new();
    let mut reports = Vec::new();
    for (sentence, map) in &p.docs {
        let c = correct_sentence(&p.model, sentence, map, &p.x_ref, params, a.reference.display_index, &p.corpus.lexicons)?;
        serde_json::to_writer(&mut out, &SentenceDocument::from_parts(sentence, &c.corrected))
            .map_err(|e| CliError::Input(e.to_string()))?;
        out.push(b'\n');
        if let Some(dir) = &a.reference.svg_dir {
            let scale = BiasScale::per_sentence(&c.report.before.tokens.iter().map(|t| t.b).collect::<Vec<_>>());
            let orig = render_heatmap(sentence, map, &RenderSpec::new(RenderMode::Heatmap))?;
            let fixed = render_heatmap(sentence, &c.corrected, &RenderSpec::new(RenderMode::CorrectedHeatmap))?;
            let before = render_bias_strip(sentence, &c.report.before, Some(scale), &RenderSpec::default())?;
            let after = render_bias_strip(sentence, &c.report.after, Some(scale), &RenderSpec::default())?;
            for (suffix, r) in [("original", orig), ("corrected", fixed), ("bias-before", before), ("bias-after", after)] {
                write_file(&svg_path(dir, &sentence.id, suffix), r.svg.as_bytes())?;
            }
        }
        reports.push(c.report);
    }
    write_output(&a.out, &out)?;
    if let Some(path) = &a.report {
        write_file(path, &json_bytes(&CorrectionOutput { reference: &p.x_ref, params, reports: &reports }))?;
    }
    let mean = reports.iter().map(|r| r.removed_percent).sum::<f64>() / reports.len().max(1) as f64;
    summary(&a.out, serde_json::json!({ "sentences": reports.len(), "mean_removed_percent": mean }));
    Ok(())
}

/// Finds the bias of `id` (or the only one) in any of the JSON shapes written
/// by `bias` and `correct`, or in a bare report.
fn find_bias(value: &serde_json::Value, id: Option<&str>, which: &str) -> Result<SentenceBias, CliError> {
    let bad = |m: String| CliError::Input(m);
    let pick_report = |v: &serde_json::Value| -> Result<SentenceBias, CliError> {
        let r: BiasReport = serde_json::from_value(v.clone()).map_err(|e| bad(e.to_string()))?;
        match which {
            "before" => Ok(r.before),
            "after" => Ok(r.after),
            other => Err(CliError::Usage(format!("--which must be before or after, got '{other}'"))),
        }
    };
    let choose = |items: &[serde_json::Value]| -> Result<serde_json::Value, CliError> {
        let found: Vec<&serde_json::Value> = items
            .iter()
            .filter(|v| id.is_none_or(|id| v["sentence_id"] == id))
            .collect();
        match (found.as_slice(), id) {
            ([one], _) | ([one, ..], Some(_)) => Ok((*one).clone()),
            ([], _) => Err(bad(format!("no bias for sentence {}", id.unwrap_or("?")))),
            _ => Err(CliError::Usage("the report has several sentences; pass --sentence-id".into())),
        }
    };
    if let Some(items) = value["reports"].as_array() {
        return pick_report(&choose(items)?);
    }
    if let Some(items) = value["sentences"].as_array() {
        return serde_json::from_value(choose(items)?).map_err(|e| bad(e.to_string()));
    }
    if value.get("before").is_some() {
        return pick_report(value);
    }
    serde_json::from_value(value.clone()).map_err(|e| bad(e.to_string()))
}

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let mode = RenderMode::parse(&a.mode)?;
    let spec = RenderSpec {
        mode,
        font: a.font.clone(),
        char_width: a.char_width,
        font_size: a.font_size,
        cell_padding: a.cell_padding,
        bar_area_height: a.bar_area_height,
        ..RenderSpec::default()
    };
    let doc = match &a.input {
        Some(p) => {
            let docs = read_documents(p)?;
            let doc = match &a.sentence_id {
                Some(id) => docs.into_iter().find(|d| &d.id == id),
                None => docs.into_iter().next(),
            };
            Some(doc.ok_or_else(|| CliError::Input(format!("{}: no matching sentence", p.display())))?.into_parts()?)
        }
        None => None,
    };
    let rendered = if mode == RenderMode::Bias {
        let path = a.report.as_ref().ok_or_else(|| CliError::Usage("bias mode needs --report".into()))?;
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let id = a.sentence_id.as_deref().or(doc.as_ref().map(|(s, _)| s.id.as_str()));
        let bias = find_bias(&value, id, &a.which)?;
        let sentence = match doc {
            Some((s, _)) => s,
            None => {
                let words: Vec<&str> = bias.tokens.iter().map(|t| t.token.as_str()).collect();
                Sentence::from_words(bias.sentence_id.clone(), &words)
            }
        };
        let scale = match a.scale.as_str() {
            "sentence" => None,
            v => Some(BiasScale::absolute(
                v.parse::<f64>()
                    .ok()
                    .filter(|x| *x > 0.0)
                    .ok_or_else(|| CliError::Usage(format!("--scale must be 'sentence' or a positive number, got '{v}'")))?,
            )),
        };
        render_bias_strip(&sentence, &bias, scale, &spec)?
    } else {
        let (sentence, map) = doc.ok_or_else(|| CliError::Usage(format!("{} mode needs --input", mode.as_str())))?;
        render_map(&sentence, &map, &spec)?
    };
    write_output(&a.out, rendered.svg.as_bytes())?;
    if let Some(p) = &a.html {
        write_file(p, rendered.html.as_bytes())?;
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let seed = need_seed(a.seed, "serve")?;
    let mode = parse_mode(&a.mode)?;
    let corpus = fit_corpus_to_mode(load_corpus(&a.corpus)?, mode);
    let mut plan = make_study_plan(&corpus.sentences, a.participants, mode, seed)?;
    if let Some(path) = &a.model {
        let model = load_model(&path.to_string_lossy())?;
        let x_ref = select_reference_context(&model, model.covariate_space(), a.samples, 0.5, seed)?;
        correct_plan(&mut plan, &corpus, &model, &x_ref, CorrectionParams { alpha: a.alpha, n_steps: a.steps })?;
    }
    let def = StudyDefinition { id: a.study_id.clone(), plan, corpus, render: RenderSpec::default() };
    let service = Service::open(&a.data_dir, vec![def])?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::io("<runtime>"))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.map_err(CliError::io(&a.addr))?;
        let addr = listener.local_addr().map_err(CliError::io(&a.addr))?;
        println!("{}", serde_json::json!({ "event": "listening", "addr": addr.to_string(), "study": a.study_id }));
        let _ = std::io::stdout().flush();
        perception_service::serve(listener, service).await.map_err(CliError::io(&a.addr))
    })
}

pub fn export(a: ExportArgs) -> Result<(), CliError> {
    let format = match a.format.as_str() {
        "csv" => ExportFormat::Csv,
        "jsonl" => ExportFormat::Jsonl,
        other => return Err(CliError::Usage(format!("--format must be csv or jsonl, got '{other}'"))),
    };
    if !a.data_dir.join("studies").join(format!("{}.json", a.study_id)).exists() {
        return Err(CliError::UnknownStudy(a.study_id.clone()));
    }
    let log = a.data_dir.join(LOG_FILE);
    let events = if log.exists() { read_events(&log)? } else { vec![] };
    let bytes = export_events(&events, &a.study_id, format, a.paper_filters)?;
    write_output(&a.out, &bytes)?;
    Ok(())
}
