//! One function per subcommand. Each prints a JSON summary on stdout.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde_json::json;
use voxelfm_core::embeddings::{
    aggregate, retrieval_metrics, sliding_window_embed, topk_search, EmbeddingRecord, EmbeddingStore,
};
use voxelfm_core::encoder::{load_checkpoint, EncoderState, PatchEmbedder};
use voxelfm_core::semantics::{ocd, ofd_saliency, pca_cielab_map, semantic_search, test_retest};
use voxelfm_core::trainer::{
    ablate, pretrain, probe_evaluate, select_checkpoint, write_ablation_table, LabeledVolume,
};
use voxelfm_core::volume::{generate_corpus, save_float_grid, VolumeKind};
use voxelfm_core::Volume;

use crate::cli::{Command, Context, DataArgs, ModelArgs, UsageError};
use crate::dataset::{self, Entry};
use crate::render::encode_rgb_png;
use crate::server;

pub fn dispatch(ctx: &Context, command: &Command) -> Result<()> {
    match command {
        Command::PhantomGen { count } => phantom_gen(ctx, *count),
        Command::Pretrain(args) => pretrain_cmd(ctx, args),
        Command::Ablate(args) => ablate_cmd(ctx, args),
        Command::Probe { checkpoints, data } => probe_cmd(ctx, checkpoints, data),
        Command::Embed { model, aggregate, labels } => embed_cmd(ctx, model, *aggregate, labels.as_deref()),
        Command::Search { model, source, center, box_size, stride, targets } => {
            search_cmd(ctx, model, source, *center, *box_size, *stride, targets)
        }
        Command::RetrieveEval { store, k } => retrieve_eval(ctx, store, *k),
        Command::Saliency { model, volume, occ, stride, fill } => saliency_cmd(ctx, model, volume, *occ, *stride, *fill),
        Command::PcaMap { model, volumes } => pca_map_cmd(ctx, model, volumes),
        Command::Stability { model, a, b, threshold } => stability_cmd(ctx, model, a, b, *threshold),
        Command::Ocd { model, label, box_size, stride } => ocd_cmd(ctx, model, *label, *box_size, *stride),
        Command::Serve { model, port, assets } => serve_cmd(ctx, model, *port, assets.clone()),
    }
}

fn out_dir(ctx: &Context) -> Result<&Path> {
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    Ok(&ctx.out)
}

fn emit(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json values serialize"));
}

fn load_model(model: &ModelArgs) -> Result<(EncoderState<f32>, Vec<Entry>)> {
    let (state, _) = load_checkpoint(&model.checkpoint)
        .with_context(|| format!("loading checkpoint {}", model.checkpoint.display()))?;
    let entries = dataset::load_dir(&model.data)?;
    if entries.is_empty() {
        bail!("no volumes in {}", model.data.display());
    }
    Ok((state, entries))
}

fn corpus_or_dir(ctx: &Context, data: &Option<PathBuf>) -> Result<Vec<Entry>> {
    match data {
        Some(dir) => dataset::load_dir(dir),
        None => Ok(generate_corpus(&ctx.config.phantom, ctx.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, (volume, mask))| Entry { id: format!("phantom_{i:03}"), volume, mask: Some(mask) })
            .collect()),
    }
}

fn phantom_gen(ctx: &Context, count: Option<usize>) -> Result<()> {
    let mut spec = ctx.config.phantom.clone();
    if let Some(c) = count {
        spec.count = c;
    }
    let out = out_dir(ctx)?;
    let corpus = generate_corpus(&spec, ctx.seed)?;
    let mut ids = Vec::new();
    for (i, (v, m)) in corpus.iter().enumerate() {
        let id = format!("phantom_{i:03}");
        dataset::save_entry(out, &id, v, Some(m))?;
        ids.push(id);
    }
    emit(json!({ "count": ids.len(), "out": out, "ids": ids }));
    Ok(())
}

fn pretrain_cmd(ctx: &Context, args: &DataArgs) -> Result<()> {
    let entries = corpus_or_dir(ctx, &args.data)?;
    let volumes: Vec<Volume> = entries.iter().map(|e| e.volume.clone()).collect();
    let mut train = ctx.config.train_config();
    train.seed = ctx.seed;
    let out = out_dir(ctx)?;
    let outcome = pretrain(&volumes, &ctx.config.encoder, &train, Some(out))?;
    emit(json!({
        "steps": outcome.curve.len(),
        "final_loss": outcome.curve.last().map(|p| p.loss),
        "checkpoints": outcome.checkpoints.iter().map(|(e, p)| json!({"epoch": e, "path": p})).collect::<Vec<_>>(),
        "loss_curve": out.join("loss_curve.csv"),
    }));
    Ok(())
}

fn ablate_cmd(ctx: &Context, args: &DataArgs) -> Result<()> {
    if !ctx.config_given {
        return Err(UsageError("ablate requires --config <json> (ablation and training budget)".into()).into());
    }
    let entries = corpus_or_dir(ctx, &args.data)?;
    let labeled = dataset::labeled(&entries)?;
    let rows = ablate(&labeled, &ctx.config.encoder, &ctx.config.train_config(), &ctx.config.ablation)?;
    let path = out_dir(ctx)?.join("ablation.csv");
    write_ablation_table(&rows, &path)?;
    emit(json!({ "rows": rows, "table": path }));
    Ok(())
}

fn probe_cmd(ctx: &Context, checkpoints: &[PathBuf], data: &Path) -> Result<()> {
    let entries = dataset::load_dir(data)?;
    let labeled: Vec<LabeledVolume> = dataset::labeled(&entries)?;
    let ab = &ctx.config.ablation;
    if labeled.len() < ab.probe_shots + ab.probe_holdout {
        bail!("{} labelled volumes; need {} shots + {} held out", labeled.len(), ab.probe_shots, ab.probe_holdout);
    }
    let (pool, eval) = labeled.split_at(labeled.len() - ab.probe_holdout);
    let mut reports = Vec::new();
    for path in checkpoints {
        let (state, header) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let mut r = probe_evaluate(&state, header.epoch, pool, eval, &[ab.probe_shots], &ab.probe)?;
        reports.append(&mut r);
    }
    let best = select_checkpoint(&reports)?;
    let value = json!({ "reports": reports, "selected_epoch": best });
    fs::write(out_dir(ctx)?.join("probe.json"), serde_json::to_vec_pretty(&value)?)?;
    emit(value);
    Ok(())
}

fn majority_label(entry: &Entry, corner: [usize; 3], patch: [usize; 3]) -> Option<i32> {
    let mask = entry.mask.as_ref()?;
    let crop = mask.grid().crop(corner, patch).ok()?;
    let mut counts: HashMap<i32, usize> = HashMap::new();
    for &l in crop.data() {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l)
}

fn read_labels(path: &Path) -> Result<HashMap<String, i32>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("id,")) {
            continue;
        }
        let (id, label) = line.split_once(',').with_context(|| format!("line {}: expected id,label", n + 1))?;
        out.insert(id.trim().to_string(), label.trim().parse().with_context(|| format!("line {}", n + 1))?);
    }
    Ok(out)
}

fn embed_cmd(ctx: &Context, model: &ModelArgs, aggregated: bool, labels: Option<&Path>) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let labels = labels.map(read_labels).transpose()?.unwrap_or_default();
    let s = &ctx.config.search;
    let mut store = EmbeddingStore::new(state.dim())?;
    let mut next_id = 0u64;
    for (scan, e) in entries.iter().enumerate() {
        let grid = sliding_window_embed(&state, &e.volume, s.patch, s.window_stride(), scan as u64)?;
        if aggregated {
            let vector = aggregate(&grid.vectors(), s.aggregation)?;
            let label = labels.get(&e.id).copied();
            store.push(EmbeddingRecord { id: next_id, vector, label, scan_id: scan as u64, grid_position: None })?;
            next_id += 1;
        } else {
            for mut r in grid.records {
                r.id = next_id;
                r.label = majority_label(e, grid_corner(&r), s.patch);
                store.push(r)?;
                next_id += 1;
            }
        }
    }
    let path = out_dir(ctx)?.join("embeddings.vfm");
    store.save(&path)?;
    let scans: Vec<_> = entries.iter().enumerate().map(|(i, e)| json!({"scan_id": i, "id": e.id})).collect();
    emit(json!({ "records": store.len(), "dim": store.dim(), "store": path, "scans": scans }));
    Ok(())
}

fn grid_corner(r: &EmbeddingRecord) -> [usize; 3] {
    let p = r.grid_position.expect("window records carry positions");
    [p[0] as usize, p[1] as usize, p[2] as usize]
}

#[allow(clippy::too_many_arguments)]
fn search_cmd(
    ctx: &Context,
    model: &ModelArgs,
    source: &str,
    center: [usize; 3],
    box_size: Option<[usize; 3]>,
    stride: Option<[usize; 3]>,
    targets: &[String],
) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let s = &ctx.config.search;
    let src = dataset::find(&entries, source)?;
    let picked: Vec<&Entry> = if targets.is_empty() {
        entries.iter().collect()
    } else {
        targets.iter().map(|t| dataset::find(&entries, t)).collect::<Result<_>>()?
    };
    let tv: Vec<(u64, &Volume)> = picked.iter().enumerate().map(|(i, e)| (i as u64, &e.volume)).collect();
    let results = semantic_search(
        &state,
        &src.volume,
        center,
        box_size.unwrap_or(s.patch),
        &tv,
        stride.unwrap_or_else(|| s.window_stride()),
    )?;
    let out = out_dir(ctx)?;
    let mut rows = Vec::new();
    for (r, e) in results.iter().zip(&picked) {
        let path = out.join(format!("heatmap_{}", e.id));
        save_float_grid(&r.to_volume(&e.volume)?, &path, VolumeKind::Heatmap)?;
        rows.push(json!({
            "target_id": e.id,
            "best_position": r.best_position,
            "best_similarity": r.best_similarity,
            "heatmap": path.with_extension("json"),
        }));
    }
    emit(json!({ "source_id": source, "results": rows }));
    Ok(())
}

fn retrieve_eval(ctx: &Context, store_path: &Path, k: Option<usize>) -> Result<()> {
    let store = EmbeddingStore::load(store_path)?;
    let k = k.unwrap_or(ctx.config.search.top_k);
    let labeled: Vec<&EmbeddingRecord> = store.records().iter().filter(|r| r.label.is_some()).collect();
    let label_of: HashMap<u64, Option<i32>> = store.records().iter().map(|r| (r.id, r.label)).collect();
    let mut sums = [0f64; 5];
    let mut queries = 0usize;
    let mut lines = vec!["id,label,precision_at_k,average_precision_at_k,hit_rate,recall_at_k,f1".to_string()];
    for q in &labeled {
        let ql = q.label.expect("filtered");
        let relevant = labeled.iter().filter(|r| r.id != q.id && r.label == Some(ql)).count();
        if relevant == 0 || store.len() <= k {
            continue;
        }
        let ranked: Vec<i32> = topk_search(&q.vector, &store, k + 1)?
            .into_iter()
            .filter(|(id, _)| *id != q.id)
            .take(k)
            .map(|(id, _)| label_of[&id].unwrap_or(-1))
            .collect();
        let m = retrieval_metrics(ql, &ranked, relevant, k)?;
        let vals = [m.precision_at_k, m.average_precision_at_k, m.hit_rate, m.recall_at_k, m.f1];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        lines.push(format!("{},{},{},{},{},{},{}", q.id, ql, vals[0], vals[1], vals[2], vals[3], vals[4]));
        queries += 1;
    }
    if queries == 0 {
        bail!("no labelled query has a relevant partner and at least k = {k} other records");
    }
    let n = queries as f64;
    let path = out_dir(ctx)?.join("retrieval.csv");
    fs::write(&path, lines.join("\n") + "\n")?;
    emit(json!({
        "k": k,
        "queries": queries,
        "precision_at_k": sums[0] / n,
        "average_precision_at_k": sums[1] / n,
        "hit_rate": sums[2] / n,
        "recall_at_k": sums[3] / n,
        "f1": sums[4] / n,
        "per_query": path,
    }));
    Ok(())
}

fn saliency_cmd(
    ctx: &Context,
    model: &ModelArgs,
    volume: &str,
    occ: Option<[usize; 3]>,
    stride: Option<[usize; 3]>,
    fill: Option<f32>,
) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let s = &ctx.config.search;
    let e = dataset::find(&entries, volume)?;
    let occ = occ.unwrap_or(s.occluder);
    let map = ofd_saliency(&state, &e.volume, occ, stride.unwrap_or(occ), fill.or(s.fill))?;
    let path = out_dir(ctx)?.join(format!("saliency_{}", e.id));
    save_float_grid(&map.to_volume(&e.volume)?, &path, VolumeKind::Saliency)?;
    let max = map.distance.data().iter().copied().fold(0.0, f64::max);
    emit(json!({
        "volume_id": e.id,
        "positions": map.distance.len(),
        "argmax_corner": map.argmax(),
        "max_distance": max,
        "fill": map.fill,
        "saliency": path.with_extension("json"),
    }));
    Ok(())
}

fn pca_map_cmd(ctx: &Context, model: &ModelArgs, ids: &[String]) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let picked: Vec<&Entry> = if ids.is_empty() {
        entries.iter().collect()
    } else {
        ids.iter().map(|i| dataset::find(&entries, i)).collect::<Result<_>>()?
    };
    let vols: Vec<&Volume> = picked.iter().map(|e| &e.volume).collect();
    let s = &ctx.config.search;
    let overlays = pca_cielab_map(&state, &vols, s.patch, s.window_stride())?;
    let out = out_dir(ctx)?;
    let mut written = Vec::new();
    for (o, e) in overlays.iter().zip(&picked) {
        let [nz, ny, nx] = o.shape;
        let z = nz / 2;
        let path = out.join(format!("pca_{}_z{z}.png", e.id));
        fs::write(&path, encode_rgb_png(nx, ny, &o.rgb[z * ny * nx..(z + 1) * ny * nx])?)?;
        let fg = o.lab.iter().filter(|l| l.is_some()).count();
        written.push(json!({ "volume_id": e.id, "png": path, "foreground_fraction": fg as f64 / o.lab.len() as f64 }));
    }
    emit(json!({ "maps": written }));
    Ok(())
}

fn stability_cmd(ctx: &Context, model: &ModelArgs, a: &str, b: &str, threshold: Option<f64>) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let s = &ctx.config.search;
    let (va, vb) = (dataset::find(&entries, a)?, dataset::find(&entries, b)?);
    let report = test_retest(
        &state,
        &va.volume,
        &vb.volume,
        s.patch,
        s.window_stride(),
        threshold.unwrap_or(s.outlier_threshold),
    )?;
    let path = out_dir(ctx)?.join("stability.csv");
    report.write_csv(&path)?;
    emit(json!({
        "positions": report.entries.len(),
        "median_cosine": report.median_cosine,
        "min_cosine": report.min_cosine,
        "outliers": report.outliers(),
        "csv": path,
    }));
    Ok(())
}

fn ocd_cmd(ctx: &Context, model: &ModelArgs, label: i32, box_size: Option<[usize; 3]>, stride: Option<[usize; 3]>) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let s = &ctx.config.search;
    let with_label: Vec<&Entry> =
        entries.iter().filter(|e| e.mask.as_ref().is_some_and(|m| m.centroid(label).is_some())).collect();
    if with_label.len() < 2 {
        bail!("label {label} is present in fewer than two masks");
    }
    let mut lines = vec!["source,target,ocd_cm".to_string()];
    let mut values = Vec::new();
    for src in &with_label {
        for tgt in &with_label {
            if src.id == tgt.id {
                continue;
            }
            let d = ocd(
                &state,
                &src.volume,
                src.mask.as_ref().expect("filtered"),
                &tgt.volume,
                tgt.mask.as_ref().expect("filtered"),
                label,
                box_size.unwrap_or(s.patch),
                stride.unwrap_or_else(|| s.window_stride()),
            )?;
            lines.push(format!("{},{},{d}", src.id, tgt.id));
            values.push(d);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let path = out_dir(ctx)?.join("ocd.csv");
    fs::write(&path, lines.join("\n") + "\n")?;
    emit(json!({ "label": label, "pairs": values.len(), "mean_cm": mean, "std_cm": sd, "csv": path }));
    Ok(())
}

fn serve_cmd(ctx: &Context, model: &ModelArgs, port: Option<u16>, assets: Option<PathBuf>) -> Result<()> {
    let (state, entries) = load_model(model)?;
    let mut cfg = ctx.config.serve.clone();
    if let Some(p) = port {
        cfg.port = p;
    }
    if assets.is_some() {
        cfg.assets_dir = assets;
    }
    let app = server::AppState::new(state, entries, ctx.config.search.clone(), cfg.job_workers);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener =
            tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, server::router(app, cfg.assets_dir.as_deref())).await?;
        Ok(())
    })
}
