use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use eran::evalkit::{
    build_slates, coldstart_evaluate, coldstart_split, coldstart_split_items, evaluate, make_planted_dataset,
    PlantedConfig, Provenance,
};
use eran::ingest::{
    bin_numeric_field, dataset_stats, filter_and_binarize, leave_one_out_split, load_attributes, load_interactions,
    write_atomically, DatasetManifest, InteractionDataset,
};
use eran::netbuild::{build_networks, AttributeNetworkSet};
use eran::personalize::write_embeddings;
use eran::recommend::{default_candidates, top_k};
use eran::trainer::{train, Checkpoint, TrainConfig};
use eran::{Error, Result};
use log::info;

use crate::config::{self, RunConfig};
use crate::{Command, Common};

const DATASET: &str = "dataset.json";
const NETWORKS: &str = "networks.json";
const MODEL: &str = "model.ckpt";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Hash of everything that can change results; the output location
    /// and thread count are left out.
    fn config_hash(&self) -> String {
        let mut cfg = self.cfg.clone();
        cfg.run.out = PathBuf::new();
        cfg.run.threads = None;
        Provenance::hash_config(&cfg.to_toml())
    }

    /// Record the effective config for `command` next to its outputs.
    fn write_config(&self, command: &str) -> Result<()> {
        write_text(&self.path(&format!("{command}.config.toml")), &self.cfg.to_toml())
    }

    fn dataset(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.path(DATASET))
    }

    fn networks(&self) -> Result<AttributeNetworkSet> {
        AttributeNetworkSet::load(&self.path(NETWORKS))
    }

    fn checkpoint(&self, explicit: Option<&Path>) -> Result<Checkpoint> {
        let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| self.path(MODEL));
        Checkpoint::load(&path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomically(path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e)))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn run(common: &Common, command: Command) -> Result<()> {
    let mut flags = common.overrides.clone();
    if let Some(seed) = common.seed {
        flags.push(format!("run.seed={seed}"));
    }
    if let Some(out) = &common.out {
        flags.push(format!("run.out={}", toml::Value::String(out.display().to_string())));
    }
    if let Command::Train { mode, flip_rank_sign } = &command {
        if let Some(m) = mode {
            flags.push(format!("train.mode=\"{m}\""));
        }
        if *flip_rank_sign {
            flags.push("train.flip_rank_sign=true".into());
        }
    }
    let env = config::env_overrides(std::env::vars());
    let (cfg, _) = config::load(common.config.as_deref(), env, &flags)?;
    if let Some(n) = cfg.run.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cfg.run.out.clone();
    create_dir(&out)?;
    let ctx = Ctx { cfg, out };
    match command {
        Command::Ingest => ingest(&ctx),
        Command::Build => build(&ctx),
        Command::Train { .. } => train_cmd(&ctx),
        Command::Eval { checkpoint } => eval(&ctx, checkpoint.as_deref()),
        Command::Coldstart { checkpoint } => coldstart(&ctx, checkpoint.as_deref()),
        Command::Recommend { user, k, checkpoint } => recommend(&ctx, &user, k, checkpoint.as_deref()),
        Command::ExportEmbeddings { checkpoint } => export(&ctx, checkpoint.as_deref()),
        Command::Synth {
            users,
            items,
            fields,
            values,
            min_history,
            max_history,
        } => synth(
            &ctx,
            PlantedConfig {
                n_users: users,
                n_items: items,
                n_fields: fields,
                values_per_field: values,
                min_history,
                max_history,
                seed: ctx.cfg.run.seed,
                ..Default::default()
            },
        ),
    }
}

fn ingest(ctx: &Ctx) -> Result<()> {
    ctx.write_config("ingest")?;
    let d = &ctx.cfg.data;
    let (Some(ratings), Some(attributes)) = (&d.interactions, &d.attributes) else {
        return Err(Error::Config("data.interactions and data.attributes are required".into()));
    };
    let raw = load_interactions(ratings, &ctx.cfg.column_mapping()?)?;
    let mapping = ctx.cfg.attribute_mapping()?;
    let mut attrs = load_attributes(attributes, &mapping)?;
    let names = mapping.field_names();
    for field in &d.bin_fields {
        let k = names
            .iter()
            .position(|n| n == field)
            .ok_or_else(|| Error::Config(format!("bin field {field:?} is not an attribute field")))?;
        bin_numeric_field(&mut attrs.records, k, d.bins);
    }
    let (ds, report) = filter_and_binarize(&raw.records, &attrs.records, &names, d.min_history, d.rating_threshold)?;
    let ds = leave_one_out_split(&ds, ctx.cfg.run.seed)?;
    let stats = dataset_stats(&ds);
    let mut manifest = DatasetManifest::new(ds, Some(ctx.cfg.run.seed));
    manifest.filter_report = Some(report);
    manifest.save(&ctx.path(DATASET))?;
    let text = format!(
        "users\titems\tactions\tfeatures\n{}\t{}\t{}\t{}\n",
        stats.users, stats.items, stats.actions, stats.features
    );
    write_text(&ctx.path("stats.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn build(ctx: &Ctx) -> Result<()> {
    ctx.write_config("build")?;
    let ds = ctx.dataset()?.dataset;
    let nets = build_networks(&ds, ctx.cfg.netbuild.co_min);
    nets.save(&ctx.path(NETWORKS))?;
    if ctx.cfg.netbuild.edge_lists {
        for (k, name) in nets.field_names.iter().enumerate() {
            nets.write_edge_list(k, &ctx.path(&format!("edges_{name}.tsv")))?;
        }
    }
    println!("co-purchase edges\t{}", nets.co_graph.n_edges());
    for (name, g) in nets.field_names.iter().zip(&nets.graphs) {
        println!("{name} edges\t{}", g.n_edges());
    }
    Ok(())
}

fn train_model(
    ctx: &Ctx,
    ds: &InteractionDataset,
    nets: &AttributeNetworkSet,
    dir: &Path,
    excluded: Vec<String>,
) -> Result<Checkpoint> {
    let cfg: &TrainConfig = &ctx.cfg.train;
    let every = ctx.cfg.run.checkpoint_every;
    let ckpt_dir = dir.join("checkpoints");
    if every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let outcome = train(ds, nets, cfg, |epoch, model, adam, _| {
        if every > 0 && (epoch + 1) % every == 0 {
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
            Checkpoint::new(epoch + 1, cfg, model, adam, excluded.clone()).save(&path)?;
            info!("wrote {}", path.display());
        }
        Ok(())
    })?;
    write_text(&dir.join("trace.tsv"), &outcome.trace.to_tsv())?;
    write_text(&dir.join("timing.tsv"), &outcome.trace.timing_tsv())?;
    let ckpt = Checkpoint::new(cfg.epochs, cfg, &outcome.model, &outcome.adam, excluded);
    ckpt.save(&dir.join(MODEL))?;
    Ok(ckpt)
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    ctx.write_config("train")?;
    let ds = ctx.dataset()?.dataset;
    let nets = ctx.networks()?;
    let ckpt = train_model(ctx, &ds, &nets, &ctx.out, Vec::new())?;
    println!("checkpoint\t{}\t{}", ctx.path(MODEL).display(), ckpt.id());
    Ok(())
}

fn parse_ks(ks: &[usize]) -> Result<Vec<usize>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K lists must be non-empty and positive".into()));
    }
    Ok(ks.to_vec())
}

fn eval(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<()> {
    ctx.write_config("eval")?;
    let manifest = ctx.dataset()?;
    let ds = &manifest.dataset;
    let nets = ctx.networks()?;
    let ckpt = ctx.checkpoint(checkpoint)?;
    if !ckpt.header.excluded_items.is_empty() {
        return Err(Error::Data("checkpoint was trained with items excluded; use coldstart".into()));
    }
    let ks = parse_ks(&ctx.cfg.eval.ks)?;
    let slates = build_slates(ds, ctx.cfg.run.seed, ctx.cfg.eval.negatives)?;
    let embeds = ckpt.model.item_embeddings(&nets)?;
    let mut report = evaluate(ds, &ckpt.model, &embeds, &slates, &ks)?;
    report.provenance = Some(Provenance {
        config_hash: ctx.config_hash(),
        seeds: vec![
            ("split".into(), manifest.split_seed.unwrap_or(ctx.cfg.run.seed)),
            ("train".into(), ckpt.header.config.seed),
            ("slates".into(), ctx.cfg.run.seed),
        ],
        checkpoint_id: ckpt.id(),
    });
    let tsv = report.to_tsv();
    write_text(&ctx.path("metrics.tsv"), &tsv)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&ctx.path("metrics.json"), &json)?;
    print!("{tsv}");
    Ok(())
}

fn coldstart(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<()> {
    ctx.write_config("coldstart")?;
    let ds = ctx.dataset()?.dataset;
    let ks = parse_ks(&ctx.cfg.eval.cold_ks)?;
    let (split, ckpt, nets) = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.header.excluded_items.is_empty() {
                return Err(Error::Data(format!("{} excludes no items", path.display())));
            }
            let held = ckpt
                .header
                .excluded_items
                .iter()
                .map(|id| {
                    ds.item_ids
                        .iter()
                        .position(|x| x == id)
                        .ok_or_else(|| Error::Data(format!("excluded item {id} not in dataset")))
                })
                .collect::<Result<Vec<_>>>()?;
            let split = coldstart_split_items(&ds, &held)?;
            let nets = build_networks(&split.reduced, ctx.cfg.netbuild.co_min);
            (split, ckpt, nets)
        }
        None => {
            let split = coldstart_split(&ds, ctx.cfg.eval.cold_items, ctx.cfg.run.seed)?;
            let nets = build_networks(&split.reduced, ctx.cfg.netbuild.co_min);
            let dir = ctx.path("coldstart");
            create_dir(&dir)?;
            let excluded = split.held.iter().map(|(a, _)| a.item_id.clone()).collect();
            let ckpt = train_model(ctx, &split.reduced, &nets, &dir, excluded)?;
            (split, ckpt, nets)
        }
    };
    let report = coldstart_evaluate(&split, &nets, &ckpt.model, &ks)?;
    let tsv = report.to_tsv();
    write_text(&ctx.path("coldstart.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn recommend(ctx: &Ctx, user_id: &str, k: usize, checkpoint: Option<&Path>) -> Result<()> {
    ctx.write_config("recommend")?;
    let ds = ctx.dataset()?.dataset;
    let nets = ctx.networks()?;
    let ckpt = ctx.checkpoint(checkpoint)?;
    let user = ds
        .user_index(user_id)
        .ok_or_else(|| Error::Data(format!("unknown user {user_id}")))?;
    let embeds = ckpt.model.item_embeddings(&nets)?;
    let positives = &ds.positives[user];
    let candidates = default_candidates(ds.n_items(), positives);
    let rec = top_k(&ckpt.model, &embeds, user, positives, &candidates, k)?;
    let mut text = String::from("rank\titem\tscore\texplanation\n");
    let mut rows = Vec::new();
    for (r, item) in rec.items.iter().enumerate() {
        let sentence = item.explanation.sentence(&ds.item_ids, &ds.field_names);
        text.push_str(&format!("{}\t{}\t{}\t{sentence}\n", r + 1, ds.item_ids[item.item], item.score));
        let attention: serde_json::Map<String, serde_json::Value> = ds
            .field_names
            .iter()
            .zip(&item.attention)
            .map(|(n, w)| (n.clone(), (*w).into()))
            .collect();
        rows.push(serde_json::json!({
            "rank": r + 1,
            "item": ds.item_ids[item.item],
            "score": item.score,
            "evidence": ds.item_ids[item.explanation.evidence],
            "attribute": ds.field_names[item.explanation.attribute],
            "attention": attention,
            "explanation": sentence,
        }));
    }
    let json = serde_json::json!({ "user": user_id, "short": rec.short, "items": rows });
    let body = serde_json::to_string_pretty(&json).map_err(|e| Error::Data(e.to_string()))?;
    let safe: String = user_id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    write_text(&ctx.path(&format!("recommend_{safe}.json")), &body)?;
    print!("{text}");
    Ok(())
}

fn export(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<()> {
    ctx.write_config("export")?;
    let ds = ctx.dataset()?.dataset;
    let nets = ctx.networks()?;
    let ckpt = ctx.checkpoint(checkpoint)?;
    let embeds = ckpt.model.item_embeddings(&nets)?;
    let dir = ctx.path("embeddings");
    create_dir(&dir)?;
    for (name, m) in nets.field_names.iter().zip(&embeds.per_field) {
        write_embeddings(&dir.join(format!("items_{name}.tsv")), &ds.item_ids, m)?;
    }
    write_embeddings(&dir.join("users.tsv"), &ds.user_ids, &ckpt.model.users.vectors)?;
    println!("{}", dir.display());
    Ok(())
}

/// Interactions (rating 5, plus a few rating-2 rows the filter drops),
/// attributes and a config that runs the whole pipeline on them.
fn synth(ctx: &Ctx, planted: PlantedConfig) -> Result<()> {
    let p = make_planted_dataset(&planted)?;
    let ds = &p.dataset;
    let mut inter = String::from("user,item,rating,timestamp\n");
    let mut t = 0u64;
    for (u, items) in ds.positives.iter().enumerate() {
        for &i in items {
            t += 1;
            inter.push_str(&format!("{},{},5,{t}\n", ds.user_ids[u], ds.item_ids[i]));
        }
        let disliked = (0..ds.n_items()).find(|i| !items.contains(i));
        if let Some(i) = disliked {
            t += 1;
            inter.push_str(&format!("{},{},2,{t}\n", ds.user_ids[u], ds.item_ids[i]));
        }
    }
    let mut attrs = format!("item,{}\n", ds.field_names.join(","));
    for (i, id) in ds.item_ids.iter().enumerate() {
        let vals: Vec<String> = ds.attributes[i].iter().map(|v| v.join("|")).collect();
        attrs.push_str(&format!("{id},{}\n", vals.join(",")));
    }
    write_text(&ctx.path("interactions.csv"), &inter)?;
    write_text(&ctx.path("attributes.csv"), &attrs)?;
    let fields: Vec<String> = ds
        .field_names
        .iter()
        .enumerate()
        .map(|(k, n)| format!("\"{n}:{}\"", k + 1))
        .collect();
    let cfg = format!(
        "[run]\nseed = {seed}\ncheckpoint_every = 5\n\n\
         [data]\ninteractions = \"interactions.csv\"\nattributes = \"attributes.csv\"\n\
         has_header = true\ntimestamp_column = 3\nattribute_has_header = true\n\
         attribute_fields = [{fields}]\nmin_history = {min}\n\n\
         [netbuild]\nco_min = 1\n\n\
         [train]\nbatch_size = 64\nlearning_rate = 0.01\nalpha = 0.3\nepochs = 20\nhidden_dims = [16]\nembedding_dim = 4\n\n\
         [eval]\nks = [5, 10]\ncold_items = 3\ncold_ks = [5, 10]\n",
        seed = planted.seed,
        fields = fields.join(", "),
        min = planted.min_history.min(3),
    );
    write_text(&ctx.path("eran.toml"), &cfg)?;
    println!("{}", ctx.out.display());
    Ok(())
}
