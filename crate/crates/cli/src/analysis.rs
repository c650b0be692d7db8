use std::collections::BTreeMap;
use std::path::Path;

use mte_core::checkpoint::Checkpoint;
use mte_core::data::{export_weight_maps, Dataset};
use mte_core::eval::{
    cka as cka_score, combination_study, ensemble_concat, fused_features, knn_classify, knn_predict, linear_probe,
    nmi as nmi_score, parse_tokens, patch_topn_features, per_class_stats, subset_curve, CombineMode, Extractor,
    FeatureMatrix, FeatureSpace, ProbeConfig, TokenId,
};
use mte_core::{Error, Result};
use serde_json::{json, Value};

use crate::run::{eval_data_config, fmt_f, fmt_pct, load_checkpoint, parse_indices, reject_mode, Run};
use crate::{Common, KnnArgs};

struct Session {
    run: Run,
    ck: Checkpoint,
    ex: Extractor,
    train: Dataset,
    test: Dataset,
    tokens: Vec<TokenId>,
}

fn default_tokens(ck: &Checkpoint, with_global: bool) -> String {
    match (ck.model.num_auxiliary() > 0, with_global) {
        (true, true) => "global,all".into(),
        (true, false) => "all".into(),
        (false, _) => "global".into(),
    }
}

/// Loads the checkpoint, resolves tokens and data, writes the manifest,
/// then loads the data.
fn open(sub: &str, common: &Common, path: &Path, default: impl Fn(&Checkpoint) -> String, options: Value) -> Result<Session> {
    reject_mode(sub, common)?;
    let ck = load_checkpoint(path)?;
    let data = eval_data_config(common, &ck)?;
    let selector = common.tokens.clone().unwrap_or_else(|| default(&ck));
    let tokens = parse_tokens(&selector, ck.model.num_aux_cls, ck.model.num_pooled)?;
    let config = json!({ "checkpoint": path, "weights": common.weights.unwrap_or_default(), "tokens": selector, "data": data, "options": options });
    let run = Run::start(sub, common, &config, common.seed.unwrap_or(0))?;
    let (train, test) = data.load()?;
    let ex = Extractor::from_checkpoint_weights(&ck, common.weights.unwrap_or_default());
    Ok(Session {
        run,
        ck,
        ex,
        train,
        test,
        tokens,
    })
}

pub fn knn(sub: &str, common: &Common, path: &Path, knn: &KnnArgs, space: &str) -> Result<()> {
    let space: FeatureSpace = space.parse()?;
    let s = open(sub, common, path, |_| "global".into(), json!({ "knn": knn, "space": space }))?;
    let tr = s.ex.extract(&s.train, &s.tokens, space)?;
    let te = s.ex.extract(&s.test, &s.tokens, space)?;
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for (a, b) in tr.iter().zip(&te) {
        let k = knn.k.min(a.rows);
        let acc = knn_classify(a, b, k, knn.temperature)?;
        rows.push(vec![a.token.clone(), k.to_string(), fmt_pct(acc)]);
        items.push(json!({ "token": a.token, "space": space, "k": k, "top1": acc }));
    }
    s.run.table("knn", &["token", "k", "top1"], &rows)?;
    s.run.jsonl("knn", &items)
}

pub fn linear(sub: &str, common: &Common, path: &Path, space: &str, probe: ProbeConfig) -> Result<()> {
    let space: FeatureSpace = space.parse()?;
    let s = open(sub, common, path, |_| "global".into(), json!({ "probe": probe, "space": space }))?;
    let tr = s.ex.extract(&s.train, &s.tokens, space)?;
    let te = s.ex.extract(&s.test, &s.tokens, space)?;
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for (a, b) in tr.iter().zip(&te) {
        let acc = linear_probe(a, b, &probe)?;
        rows.push(vec![a.token.clone(), fmt_pct(acc)]);
        items.push(json!({ "token": a.token, "space": space, "top1": acc }));
    }
    s.run.table("linear", &["token", "top1"], &rows)?;
    s.run.jsonl("linear", &items)
}

pub fn cka(sub: &str, common: &Common, path: &Path, space: &str) -> Result<()> {
    let space: FeatureSpace = space.parse()?;
    let s = open(sub, common, path, |ck| default_tokens(ck, true), json!({ "space": space }))?;
    let feats = s.ex.extract(&s.test, &s.tokens, space)?;
    let names: Vec<&str> = feats.iter().map(|f| f.token.as_str()).collect();
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for a in &feats {
        let mut row = vec![a.token.clone()];
        for b in &feats {
            let v = cka_score(a, b)?;
            row.push(fmt_f(v));
            items.push(json!({ "a": a.token, "b": b.token, "cka": v }));
        }
        rows.push(row);
    }
    let mut header = vec!["token"];
    header.extend(&names);
    s.run.table("cka", &header, &rows)?;
    s.run.jsonl("cka", &items)
}

pub fn nmi(sub: &str, common: &Common, path: &Path) -> Result<()> {
    let s = open(sub, common, path, |ck| default_tokens(ck, true), json!({}))?;
    let mut feats = s.ex.extract(&s.test, &s.tokens, FeatureSpace::PostHead)?;
    if s.ck.model.num_auxiliary() > 0 {
        feats.push(fused_features(&s.ex, &s.test)?);
    }
    let mut rows = Vec::new();
    let mut items = Vec::new();
    let mut scores = BTreeMap::new();
    for f in &feats {
        let v = nmi_score(&f.argmax(), &f.labels)?;
        scores.insert(f.token.clone(), v);
        rows.push(vec![f.token.clone(), fmt_f(v)]);
        items.push(json!({ "token": f.token, "nmi": v }));
    }
    s.run.table("nmi", &["token", "nmi"], &rows)?;
    if let (Some(g), Some(f)) = (scores.get("global"), scores.get("fused")) {
        println!("global vs fused gap: {:.4}", (g - f).abs());
    }
    s.run.jsonl("nmi", &items)
}

fn token_map(tokens: &[TokenId], feats: Vec<FeatureMatrix>) -> BTreeMap<TokenId, FeatureMatrix> {
    tokens.iter().copied().zip(feats).collect()
}

pub fn combination(
    sub: &str,
    common: &Common,
    path: &Path,
    combine: &str,
    subset: Option<&str>,
    with_knn: bool,
    knn: &KnnArgs,
) -> Result<()> {
    let mode: CombineMode = combine.parse()?;
    let options = json!({ "combine": mode, "subset": subset, "knn": with_knn.then_some(knn) });
    let s = open(sub, common, path, |ck| default_tokens(ck, false), options)?;
    let universe = match subset {
        Some(sel) => parse_tokens(sel, s.ck.model.num_aux_cls, s.ck.model.num_pooled)?,
        None => s.tokens.clone(),
    };
    let post = token_map(&universe, s.ex.extract(&s.test, &universe, FeatureSpace::PostHead)?);
    let enc = if with_knn {
        Some((
            token_map(&universe, s.ex.extract(&s.train, &universe, FeatureSpace::Encoder)?),
            token_map(&universe, s.ex.extract(&s.test, &universe, FeatureSpace::Encoder)?),
        ))
    } else {
        None
    };
    let enc_ref = enc.as_ref().map(|(a, b)| (a, b));
    let show = |v: Option<f64>| v.map_or("-".to_string(), fmt_pct);
    if subset.is_some() {
        let r = combination_study(&post, enc_ref, &universe, mode, knn.k, knn.temperature)?;
        let name = universe.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
        s.run.table("combination", &["tokens", "nmi", "knn_top1"], &[vec![name, fmt_f(r.nmi), show(r.knn_top1)]])?;
        return s.run.jsonl("combination", &[r]);
    }
    let curve = subset_curve(&post, enc_ref, &universe, mode, knn.k, knn.temperature)?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| vec![p.size.to_string(), p.combinations.to_string(), fmt_f(p.nmi_mean), show(p.knn_mean)])
        .collect();
    s.run.table("combination", &["size", "combinations", "nmi_mean", "knn_mean"], &rows)?;
    s.run.jsonl("combination", &curve)
}

pub fn per_class(sub: &str, common: &Common, path: &Path, space: &str, knn: &KnnArgs) -> Result<()> {
    let space: FeatureSpace = space.parse()?;
    let s = open(sub, common, path, |ck| default_tokens(ck, true), json!({ "space": space, "knn": knn }))?;
    let tr = s.ex.extract(&s.train, &s.tokens, space)?;
    let te = s.ex.extract(&s.test, &s.tokens, space)?;
    let preds = tr
        .iter()
        .zip(&te)
        .map(|(a, b)| knn_predict(a, b, knn.k.min(a.rows), knn.temperature))
        .collect::<Result<Vec<_>>>()?;
    let stats = per_class_stats(&preds, &s.test.labels)?;
    let names: Vec<&str> = te.iter().map(|f| f.token.as_str()).collect();
    let rows: Vec<Vec<String>> = stats
        .classes
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut r = vec![c.to_string()];
            r.extend(stats.accuracy.iter().map(|acc| fmt_pct(acc[j])));
            r.push(fmt_pct(stats.std[j]));
            r
        })
        .collect();
    let mut header = vec!["class"];
    header.extend(&names);
    header.push("std");
    s.run.table("per_class", &header, &rows)?;
    let best: Vec<Vec<String>> = names.iter().zip(&stats.best_counts).map(|(n, c)| vec![n.to_string(), c.to_string()]).collect();
    s.run.table("best_counts", &["token", "classes_best"], &best)?;
    s.run.json("per_class", &json!({ "tokens": names, "stats": stats }))
}

pub fn patch_knn(sub: &str, common: &Common, path: &Path, top: &str, head: Option<usize>, knn: &KnnArgs) -> Result<()> {
    let ns = parse_indices(top)?;
    let s = open(sub, common, path, |_| "global".into(), json!({ "top": ns, "head": head, "knn": knn }))?;
    let tr = patch_topn_features(&s.ex, &s.train, &ns, head)?;
    let te = patch_topn_features(&s.ex, &s.test, &ns, head)?;
    let gtr = s.ex.extract(&s.train, &[TokenId::Global], FeatureSpace::Encoder)?;
    let gte = s.ex.extract(&s.test, &[TokenId::Global], FeatureSpace::Encoder)?;
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for (a, b) in gtr.iter().chain(&tr).zip(gte.iter().chain(&te)) {
        let acc = knn_classify(a, b, knn.k.min(a.rows), knn.temperature)?;
        rows.push(vec![a.token.clone(), fmt_pct(acc)]);
        items.push(json!({ "features": a.token, "top1": acc }));
    }
    s.run.table("patch_knn", &["features", "top1"], &rows)?;
    s.run.jsonl("patch_knn", &items)
}

pub fn ensemble(sub: &str, common: &Common, paths: &[std::path::PathBuf], knn: &KnnArgs) -> Result<()> {
    reject_mode(sub, common)?;
    let cks = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let first = cks.first().ok_or_else(|| Error::Usage("no checkpoints given".into()))?;
    let data = eval_data_config(common, first)?;
    let selector = common.tokens.clone().unwrap_or_else(|| "global".into());
    let config = json!({ "checkpoints": paths, "tokens": selector, "data": data, "knn": knn });
    let run = Run::start(sub, common, &config, common.seed.unwrap_or(0))?;
    let (train, test) = data.load()?;
    let mut members = Vec::new();
    let mut rows = Vec::new();
    for (p, ck) in paths.iter().zip(&cks) {
        let tokens = parse_tokens(&selector, ck.model.num_aux_cls, ck.model.num_pooled)?;
        let ex = Extractor::from_checkpoint_weights(ck, common.weights.unwrap_or_default());
        let join = |d: &Dataset| -> Result<FeatureMatrix> {
            let f: Vec<FeatureMatrix> = ex.extract(d, &tokens, FeatureSpace::Encoder)?.iter().map(FeatureMatrix::normalized).collect();
            FeatureMatrix::concat(&f.iter().collect::<Vec<_>>(), p.display().to_string())
        };
        let (a, b) = (join(&train)?, join(&test)?);
        let acc = knn_classify(&a, &b, knn.k.min(a.rows), knn.temperature)?;
        rows.push(vec![p.display().to_string(), a.cols.to_string(), fmt_pct(acc)]);
        members.push((a, b));
    }
    let (acc, dim) = ensemble_concat(&members, knn.k, knn.temperature)?;
    rows.push(vec!["ensemble".into(), dim.to_string(), fmt_pct(acc)]);
    run.table("ensemble", &["model", "dim", "top1"], &rows)?;
    run.json("ensemble", &json!({ "top1": acc, "dim": dim }))
}

pub fn export_weights(sub: &str, common: &Common, path: &Path, images: &str, channels: &str) -> Result<()> {
    reject_mode(sub, common)?;
    let (images, channels) = (parse_indices(images)?, parse_indices(channels)?);
    let ck = load_checkpoint(path)?;
    let data = eval_data_config(common, &ck)?;
    let config = json!({ "checkpoint": path, "images": images, "channels": channels, "data": data });
    let run = Run::start(sub, common, &config, common.seed.unwrap_or(0))?;
    let (_, test) = data.load()?;
    let files = export_weight_maps(&ck.params_for(common.weights.unwrap_or_default()), &ck.model, &test, &images, &channels, &run.dir.join("weights"))?;
    let rows: Vec<Vec<String>> = files.iter().map(|f| vec![f.display().to_string()]).collect();
    run.table("files", &["file"], &rows)
}
