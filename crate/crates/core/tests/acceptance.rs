//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthpaste::compositor::{layer_instances, paste, Layer};
use synthpaste::context_mining::{augment_context, extract_context_edited, Caption, NounLexicon, ObjectVocabulary};
use synthpaste::dataset::{mix_manifests, CocoFile, DatasetManifest, InstanceSummary, ManifestImage, Origin};
use synthpaste::foreground::{extract_mask, AssetProvenance, ExtractionParams, ForegroundAsset};
use synthpaste::gateway::PngBytes;
use synthpaste::mask::mask_to_bbox;
use synthpaste::pipeline::{plan_counts, validate_dataset, CountPlan, Pipeline, PipelineConfig, PlanInputs, RealData, Recipe};
use synthpaste::prompting::{apply_edit_rules, label_set, EditRule, TemplateSet};
use synthpaste::selection::{rank_and_select, CandidateId, ScoredImage, SelectionPolicy};
use synthpaste::{BBox, BinaryMask};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const VOC: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "dining table", "dog",
    "horse", "motorbike", "person", "potted plant", "sheep", "sofa", "train", "tv monitor",
];

fn real(fraction: f64) -> RealData {
    RealData {
        annotations: "real/annotations.json".into(),
        images: "real".into(),
        real_fraction: fraction,
        include_real_foreground_pastes: None,
        mix: None,
    }
}

fn row(plan: &CountPlan) -> [String; 4] {
    [
        plan.real_images.to_string(),
        plan.foregrounds.to_string(),
        plan.backgrounds.to_string(),
        plan.training.to_string(),
    ]
}

fn count_arithmetic() -> Check {
    let templates = TemplateSet::bundled();
    let base = PipelineConfig::new(&VOC);
    let err = |e: synthpaste::Error| e.to_string();
    let zero = plan_counts(&base, &templates, PlanInputs::default()).map_err(err)?;
    ensure(zero.foregrounds.synthetic == 24_000, || format!("foregrounds {}", zero.foregrounds.synthetic))?;
    ensure(zero.backgrounds.template == 9_120, || format!("template backgrounds {}", zero.backgrounds.template))?;

    let shots = PlanInputs { cdis: 200, real_images: 200, real_foregrounds: 541, mix_images: 200 };
    let mut pure = base.clone();
    pure.cdi_dir = Some("cdis".into());
    let ten = plan_counts(&pure, &templates, shots).map_err(err)?;
    ensure(ten.backgrounds.context == 12_000, || format!("context backgrounds {}", ten.backgrounds.context))?;

    let mut syn_fg = base.clone();
    syn_fg.recipe = Recipe::SynFg;
    syn_fg.real = Some(real(1.0));
    // The reference Syn + Real row counts the training set as 60k: the
    // 200 shots enter as backgrounds and cutouts, not as extra records.
    let mut syn_real = pure.clone();
    syn_real.recipe = Recipe::SynPlusReal;
    syn_real.real = Some(real(0.0));
    let mut syn_real_full = syn_real.clone();
    syn_real_full.real = Some(real(1.0));
    let full = PlanInputs { mix_images: 1_464, ..shots };

    let table: [(&str, &PipelineConfig, PlanInputs, [&str; 4]); 5] = [
        ("0-shot (Pure Syn)", &base, PlanInputs::default(), ["0", "24k", "9120", "60k"]),
        ("10-shot (Syn Fg)", &syn_fg, shots, ["200", "24k", "200", "60k"]),
        ("10-shot (Pure Syn)", &pure, shots, ["200", "24k", "9120+12k", "60k"]),
        ("10-shot (Syn + Real)", &syn_real, shots, ["200", "24k+541", "9120+12k+200", "60k"]),
        ("10-shot (Syn + Real) + 1464", &syn_real_full, full, ["1464", "24k+541", "9120+12k+200", "60k + 1464"]),
    ];
    for (name, config, inputs, expected) in table {
        let plan = plan_counts(config, &templates, inputs).map_err(err)?;
        let got = row(&plan);
        ensure(got == expected, || format!("{name}: got {got:?}, expected {expected:?}"))?;
    }
    Ok("24000 / 9120 / 12000 and 5 recipe rows exact".into())
}

fn desk_config() -> PipelineConfig {
    let mut c = PipelineConfig::new(&["dog", "cat", "bus"]);
    c.master_seed = 2024;
    c.counts.fg_per_template = 20;
    c.counts.fg_keep = Some(8);
    c.counts.bg_per_template = 10;
    c.counts.bg_keep_fraction = Some(0.95);
    c.counts.target_size = 500;
    c
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

struct DeskRun {
    elapsed: Duration,
    root: tempfile::TempDir,
}

fn desk_run() -> Result<DeskRun, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let pipeline = Pipeline::new(desk_config(), root.path()).map_err(|e| e.to_string())?;
    pipeline.run().map_err(|e| e.to_string())?;
    Ok(DeskRun { elapsed: start.elapsed(), root })
}

fn desk_end_to_end(first: &DeskRun, second: &DeskRun) -> Check {
    let dir = first.root.path().join("dataset");
    let report = validate_dataset(&dir).map_err(|e| format!("invalid COCO: {e}"))?;
    ensure(report.images == 500, || format!("{} images", report.images))?;
    let non_empty = (report.images - report.empty_images) as f64 / report.images as f64;
    ensure(non_empty >= 0.95, || format!("only {:.1}% of samples hold an instance", non_empty * 100.0))?;
    for run in [first, second] {
        ensure(run.elapsed < Duration::from_secs(120), || format!("run took {:?}", run.elapsed))?;
    }
    let other = second.root.path().join("dataset");
    let files = files_under(&dir);
    ensure(files == files_under(&other), || "runs wrote different file sets".into())?;
    for f in &files {
        let same = std::fs::read(dir.join(f)).unwrap() == std::fs::read(other.join(f)).unwrap();
        ensure(same, || format!("{} differs between runs", f.display()))?;
    }
    Ok(format!(
        "500 images, {} annotations, {:.1}% non-empty, {:.1}s / {:.1}s, {} files byte-identical",
        report.annotations,
        non_empty * 100.0,
        first.elapsed.as_secs_f64(),
        second.elapsed.as_secs_f64(),
        files.len()
    ))
}

fn bbox_exhaustive(run: &DeskRun) -> Check {
    let coco = CocoFile::load(&run.root.path().join("dataset/annotations.json")).map_err(|e| e.to_string())?;
    for ann in &coco.annotations {
        let mask = ann.segmentation.decode().map_err(|e| e.to_string())?;
        let bbox = mask_to_bbox(&mask).map_err(|e| e.to_string())?;
        ensure(bbox.to_coco() == ann.bbox, || format!("annotation {} bbox {:?} vs {:?}", ann.id, ann.bbox, bbox))?;
        ensure(mask.count() as u64 == ann.area, || format!("annotation {} area", ann.id))?;
    }
    Ok(format!("{} annotations checked", coco.annotations.len()))
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            Shape::Polygon(pts) => (0..pts.len()).all(|i| {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[(i + 1) % pts.len()];
                (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
            }),
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, side: f64) -> Shape {
    let margin = 16.0;
    match rng.random_range(0..3) {
        0 => {
            let r = rng.random_range(24.0..side * 0.3);
            Shape::Disk {
                cx: rng.random_range(margin + r..side - margin - r),
                cy: rng.random_range(margin + r..side - margin - r),
                r,
            }
        }
        1 => {
            let (w, h) = (rng.random_range(40.0..side * 0.6), rng.random_range(40.0..side * 0.6));
            let x0 = rng.random_range(margin..side - margin - w);
            let y0 = rng.random_range(margin..side - margin - h);
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        _ => {
            let r = rng.random_range(40.0..side * 0.35);
            let (cx, cy) = (
                rng.random_range(margin + r..side - margin - r),
                rng.random_range(margin + r..side - margin - r),
            );
            let k = rng.random_range(3..9);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            Shape::Polygon(angles.into_iter().map(|a| (cx + r * a.cos(), cy + r * a.sin())).collect())
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn distinct_colour(rng: &mut ChaCha8Rng, from: [u8; 3]) -> [u8; 3] {
    loop {
        let c = [rng.random(), rng.random(), rng.random()];
        if (0..3).any(|i| (c[i] as i32 - from[i] as i32).abs() >= 80) {
            return c;
        }
    }
}

fn extraction_corpus() -> Check {
    let side = 256u32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ExtractionParams::default();
    let mut ious = Vec::new();
    while ious.len() < 100 {
        let shape = random_shape(&mut rng, side as f64);
        let truth = BinaryMask::from_fn(side, side, |x, y| shape.contains(x as f64 + 0.5, y as f64 + 0.5));
        if !(0.03..=0.7).contains(&truth.area_fraction()) {
            continue;
        }
        let bg: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let fg = distinct_colour(&mut rng, bg);
        let mut image = RgbaImage::new(side, side);
        for (x, y, p) in image.enumerate_pixels_mut() {
            let base = if truth.get(x, y) { fg } else { bg };
            let mut px = [0u8; 4];
            for c in 0..3 {
                px[c] = (base[c] as f64 + 4.0 * gaussian(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
            px[3] = 255;
            *p = Rgba(px);
        }
        let mask = extract_mask(&image, &params).map_err(|e| format!("corpus image {}: {e}", ious.len()))?;
        ious.push(mask.iou(&truth));
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(mean >= 0.95 && min >= 0.90, || format!("mean IoU {mean:.4}, min {min:.4}"))?;
    Ok(format!("mean IoU {mean:.4}, min {min:.4} over 100 images"))
}

fn random_asset(rng: &mut ChaCha8Rng) -> ForegroundAsset {
    let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
    let density = rng.random_range(0.2..1.0);
    let mut mask = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density));
    mask.set(rng.random_range(0..w), rng.random_range(0..h), true);
    let image = RgbaImage::from_fn(w, h, |_, _| Rgba([rng.random(), rng.random(), rng.random(), 255]));
    let provenance = AssetProvenance {
        label: "dog".into(),
        template_id: Some(0),
        seed: 0,
        index: 0,
        prompt: String::new(),
        source_bbox: BBox { x: 0, y: 0, w: 0, h: 0 },
        source_width: 0,
        source_height: 0,
        score: None,
    };
    ForegroundAsset::from_masked(&image, &mask, provenance).unwrap()
}

fn paste_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let (cw, ch) = (rng.random_range(40..100), rng.random_range(40..100));
        let mut canvas = RgbImage::from_fn(cw, ch, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let asset = random_asset(&mut rng);
        let (aw, ah) = (asset.mask.width(), asset.mask.height());
        let x = rng.random_range(0..=cw - aw) as i64;
        let y = rng.random_range(0..=ch - ah) as i64;
        let mut naive = canvas.clone();
        let mut naive_mask = BinaryMask::new(cw, ch);
        for (ax, ay) in asset.mask.iter_set() {
            let p = asset.image.get_pixel(ax, ay);
            let (tx, ty) = (x as u32 + ax, y as u32 + ay);
            naive.put_pixel(tx, ty, Rgb([p[0], p[1], p[2]]));
            naive_mask.set(tx, ty, true);
        }
        let mask = paste(&mut canvas, &asset, x, y, 0.0).map_err(|e| format!("case {case}: {e}"))?;
        ensure(canvas == naive, || format!("case {case}: pixels differ from naive replacement"))?;
        ensure(mask == naive_mask, || format!("case {case}: mask differs"))?;
    }
    Ok("200 random cases bit-equal".into())
}

fn zbuffer_oracle() -> Check {
    let side = 128u32;
    let min_visible = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut kept = 0;
    for scene in 0..1_000 {
        let n = rng.random_range(1..7);
        let layers: Vec<Layer> = (0..n)
            .map(|i| {
                let shape = random_shape(&mut rng, side as f64);
                let mut mask = BinaryMask::from_fn(side, side, |x, y| shape.contains(x as f64 + 0.5, y as f64 + 0.5));
                if rng.random_bool(0.2) {
                    mask = BinaryMask::new(side, side);
                }
                Layer { category_id: 1 + i as u32 % 3, label: format!("l{i}"), source_asset: format!("a{i}"), mask }
            })
            .collect();
        let mut top = vec![None; (side * side) as usize];
        for (i, layer) in layers.iter().enumerate() {
            for (x, y) in layer.mask.iter_set() {
                top[(y * side + x) as usize] = Some(i);
            }
        }
        let mut expected = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let visible = BinaryMask::from_fn(side, side, |x, y| top[(y * side + x) as usize] == Some(i));
            let (shown, total) = (visible.count(), layer.mask.count());
            if total == 0 || shown == 0 {
                continue;
            }
            let fraction = shown as f64 / total as f64;
            if fraction < min_visible {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for (x, y) in visible.iter_set() {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            }
            expected.push((layer.source_asset.clone(), visible, fraction, BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 }));
        }
        let got = layer_instances(layers, min_visible);
        ensure(got.len() == expected.len(), || format!("scene {scene}: {} instances, oracle {}", got.len(), expected.len()))?;
        for (g, (source, mask, fraction, bbox)) in got.iter().zip(&expected) {
            ensure(&g.source_asset == source && &g.mask == mask, || format!("scene {scene}: mask of {source}"))?;
            ensure(g.visible_fraction == *fraction, || format!("scene {scene}: visible fraction of {source}"))?;
            ensure(g.bbox == *bbox, || format!("scene {scene}: bbox of {source}"))?;
        }
        kept += got.len();
    }
    Ok(format!("1000 scenes of 128x128, {kept} instances match"))
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<ScoredImage>, SelectionPolicy, usize, f64) {
    let n = rng.random_range(1..=16);
    let classes = ["a", "b", "c"];
    let n_classes = rng.random_range(0..=3);
    let weight = [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)];
    let batch = (0..n)
        .map(|i| {
            let sims: BTreeMap<String, f64> =
                classes[..n_classes].iter().map(|c| (c.to_string(), rng.random_range(0..5) as f64 * 0.25)).collect();
            let own = if n_classes > 0 && rng.random_bool(0.5) {
                Some(classes[rng.random_range(0..n_classes)].to_string())
            } else {
                None
            };
            ScoredImage {
                id: CandidateId { seed: rng.random_range(0..3), index: i as u32 },
                image: PngBytes(Vec::new()),
                prompt: String::new(),
                own_class: own,
                faithfulness: rng.random_range(0..5) as f64 * 0.25,
                class_similarities: sims,
            }
        })
        .collect();
    let (policy, keep) = if rng.random_bool(0.5) {
        let k = rng.random_range(1..=20);
        (SelectionPolicy::keep_k(k), k.min(n))
    } else {
        let pct = rng.random_range(1..=100);
        (SelectionPolicy::keep_fraction(pct as f64 / 100.0), (pct * n).div_ceil(100))
    };
    (batch, policy.with_weight(weight), keep, weight)
}

fn brute_force(batch: &[ScoredImage], keep: usize, weight: f64) -> Vec<CandidateId> {
    let mut scored: Vec<(f64, CandidateId)> = batch
        .iter()
        .map(|c| {
            let penalty = c
                .class_similarities
                .iter()
                .filter(|(name, _)| Some(*name) != c.own_class.as_ref())
                .map(|(_, s)| *s)
                .fold(0.0f64, |m, s| if s > m { s } else { m });
            let others = c.class_similarities.keys().any(|k| Some(k) != c.own_class.as_ref());
            (c.faithfulness - weight * if others { penalty } else { 0.0 }, c.id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(keep).map(|(_, id)| id).collect()
}

fn selection_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut trials = 0;
    while trials < 500 {
        let (batch, policy, keep, weight) = random_batch(&mut rng);
        let ids: Vec<CandidateId> = batch.iter().map(|c| c.id).collect();
        if ids.iter().collect::<std::collections::HashSet<_>>().len() != ids.len() {
            continue;
        }
        let expected = brute_force(&batch, keep, weight);
        let got: Vec<CandidateId> = rank_and_select(batch, &policy).map_err(|e| e.to_string())?.iter().map(|c| c.id).collect();
        ensure(got == expected, || format!("batch {trials}: got {got:?}, brute force {expected:?}"))?;
        trials += 1;
    }
    let mut mono = 0;
    while mono < 500 {
        let (batch, policy, _, _) = random_batch(&mut rng);
        let ids: Vec<CandidateId> = batch.iter().map(|c| c.id).collect();
        if ids.iter().collect::<std::collections::HashSet<_>>().len() != ids.len() {
            continue;
        }
        let kept: Vec<CandidateId> = rank_and_select(batch.clone(), &policy).unwrap().iter().map(|c| c.id).collect();
        let target = kept[rng.random_range(0..kept.len())];
        let mut raised = batch;
        let bump = rng.random_range(0.01..1.0);
        raised.iter_mut().filter(|c| c.id == target).for_each(|c| c.faithfulness += bump);
        let after = rank_and_select(raised, &policy).unwrap();
        ensure(after.iter().any(|c| c.id == target), || format!("trial {mono}: raising a kept candidate dropped it"))?;
        mono += 1;
    }
    Ok("500 brute-force batches, 500 monotonicity trials".into())
}

fn class_tokens() -> Vec<String> {
    let mut out = Vec::new();
    for label in VOC {
        for t in label.split(' ') {
            out.push(t.to_string());
            out.push(format!("{t}s"));
            out.push(format!("{t}es"));
            if let Some(stem) = t.strip_suffix('y') {
                out.push(format!("{stem}ies"));
            }
        }
    }
    out
}

fn context_mining() -> Check {
    let dog = label_set(&["dog"]).unwrap();
    let vocabulary = ObjectVocabulary::new(&dog, &NounLexicon::bundled());
    let caption = Caption::new("A dog lying on grass field", "cdi", 0).unwrap();
    let phrases = extract_context_edited(&caption, &vocabulary, &[]);
    let names: Vec<&str> = phrases.iter().map(|p| p.phrase.as_str()).collect();
    ensure(names == ["grass field"], || format!("worked example phrases {names:?}"))?;
    let prompts = augment_context(&phrases, 1);
    ensure(prompts == ["A real photo of grass field"], || format!("worked example prompts {prompts:?}"))?;

    let cartoon = [EditRule::substitute("cartoon", "real").unwrap()];
    let edited = apply_edit_rules("a cartoon kitchen", &cartoon);
    ensure(edited == "a real kitchen", || format!("cartoon edit gave {edited:?}"))?;
    let people = [EditRule::remove("a couple of people").unwrap(), EditRule::append("without people").unwrap()];
    let edited = apply_edit_rules("a couple of people in a kitchen", &people);
    ensure(edited == "in a kitchen without people", || format!("people edit gave {edited:?}"))?;
    let caption = Caption::new("a couple of people in a kitchen", "cdi", 0).unwrap();
    let prompts = augment_context(&extract_context_edited(&caption, &vocabulary, &people), 1);
    ensure(prompts == ["A real photo of kitchen without people"], || format!("people prompts {prompts:?}"))?;

    let labels = label_set(&VOC).unwrap();
    let vocabulary = ObjectVocabulary::new(&labels, &NounLexicon::bundled());
    let forbidden = class_tokens();
    let corpus = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/captions.txt"))
        .map_err(|e| e.to_string())?;
    let mut emitted = 0;
    for (i, line) in corpus.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let caption = Caption::new(line, "fixture", i as u32).unwrap();
        for prompt in augment_context(&extract_context_edited(&caption, &vocabulary, &[]), 3) {
            let lower = prompt.to_lowercase();
            let hit = lower
                .split(|c: char| !c.is_alphanumeric())
                .find(|w| forbidden.iter().any(|f| f == w));
            ensure(hit.is_none(), || format!("caption {line:?} emitted {prompt:?}"))?;
            emitted += 1;
        }
    }
    ensure(emitted > 0, || "fixture corpus emitted no prompts".into())?;
    Ok(format!("worked example and interventions exact, {emitted} fixture prompts class-free"))
}

fn stub_manifest(n: usize, origin: Origin, lineage: Vec<u64>) -> DatasetManifest {
    let categories = label_set(&VOC).unwrap();
    DatasetManifest {
        name: format!("{origin:?}"),
        images: (0..n)
            .map(|i| ManifestImage {
                id: i as u64 + 1,
                file: format!("images/{:06}.png", i + 1),
                width: 512,
                height: 512,
                origin,
                instances: vec![InstanceSummary { category_id: 1 + (i % 20) as u32, visible_fraction: 1.0 }],
            })
            .collect(),
        annotation_count: n as u64,
        categories,
        seed_lineage: lineage,
    }
}

fn mixing() -> Check {
    let syn = stub_manifest(60_000, Origin::Synthetic, vec![11]);
    let mut sizes = Vec::new();
    for (real_n, expected) in [(200, 60_200), (1_464, 61_464)] {
        let real = stub_manifest(real_n, Origin::Real, vec![]);
        let mixed = mix_manifests(&syn, &real, 1.0).map_err(|e| e.to_string())?;
        mixed.check().map_err(|e| format!("referential integrity: {e}"))?;
        ensure(mixed.images.len() == expected, || format!("{} images, expected {expected}", mixed.images.len()))?;
        let reals = mixed.images.iter().filter(|i| i.origin == Origin::Real).count();
        ensure(reals == real_n, || format!("{reals} real records"))?;
        ensure(mixed.images[..60_000].iter().all(|i| i.origin == Origin::Synthetic), || "synthetic not first".into())?;
        sizes.push(mixed.images.len());
    }
    Ok(format!("{} and {} image records", sizes[0], sizes[1]))
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, result: Check| match result {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(reason) => {
            failures += 1;
            println!("FAIL  {name}: {reason}");
        }
    };
    report("count arithmetic at full scale", count_arithmetic());
    match (desk_run(), desk_run()) {
        (Ok(first), Ok(second)) => {
            report("desk-scale end-to-end (mock backend)", desk_end_to_end(&first, &second));
            report("compositor oracle: bbox = mask_to_bbox on desk run", bbox_exhaustive(&first));
        }
        (Err(e), _) | (_, Err(e)) => {
            report("desk-scale end-to-end (mock backend)", Err(e.clone()));
            report("compositor oracle: bbox = mask_to_bbox on desk run", Err(e));
        }
    }
    report("foreground extraction on procedural corpus", extraction_corpus());
    report("compositor oracle: sigma=0 paste", paste_oracle());
    report("compositor oracle: z-buffer occlusion", zbuffer_oracle());
    report("selection oracles", selection_oracles());
    report("context mining", context_mining());
    report("dataset mixing", mixing());
    if failures > 0 {
        println!("{failures} criterion check(s) failed");
        std::process::exit(1);
    }
    println!("all criterion checks passed");
}
