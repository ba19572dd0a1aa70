//! Procedurally generated grounded world: attributed scenes, their noisy
//! feature-vector renderings, template captions with gold part-of-speech
//! tags, the vocabulary, and the train/val/test corpus.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seed::{self, tag};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Upper bound on caption and utterance length, in tokens.
pub const MAX_UTTERANCE_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "DET")]
    Det,
    #[serde(rename = "ADJ")]
    Adj,
    #[serde(rename = "NOUN")]
    Noun,
    #[serde(rename = "ADP")]
    Adp,
    #[serde(rename = "VERB")]
    Verb,
}

impl PosTag {
    pub const ALL: [PosTag; 5] = [PosTag::Det, PosTag::Adj, PosTag::Noun, PosTag::Adp, PosTag::Verb];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Det => "DET",
            PosTag::Adj => "ADJ",
            PosTag::Noun => "NOUN",
            PosTag::Adp => "ADP",
            PosTag::Verb => "VERB",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown POS tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub relations: Vec<String>,
    pub max_objects: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            shapes: strings(&["circle", "square", "triangle", "star", "cross"]),
            colors: strings(&["red", "green", "blue", "yellow", "purple", "orange"]),
            sizes: strings(&["small", "big"]),
            relations: strings(&["left-of", "right-of", "above", "below"]),
            max_objects: 2,
        }
    }
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for (what, list) in [
            ("shapes", &self.shapes),
            ("colors", &self.colors),
            ("sizes", &self.sizes),
            ("relations", &self.relations),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("schema {what} list is empty")));
            }
            for w in list {
                if w.is_empty() || w.contains(char::is_whitespace) {
                    return Err(Error::Config(format!("schema word `{w}` must be a single token")));
                }
                // a word may appear in only one slot, or its POS tag would be ambiguous
                if !seen.insert(w.as_str()) || FUNCTION_WORDS.iter().any(|(f, _)| f == w) {
                    return Err(Error::Config(format!("schema word `{w}` is duplicated")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub relation: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub relations: Vec<Relation>,
}

impl Scene {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > schema.max_objects {
            return Err(Error::Argument(format!(
                "scene has {} objects, allowed 1..={}",
                self.objects.len(),
                schema.max_objects
            )));
        }
        for o in &self.objects {
            if o.shape >= schema.shapes.len() || o.color >= schema.colors.len() || o.size >= schema.sizes.len() {
                return Err(Error::Argument("object attribute out of range".into()));
            }
        }
        for r in &self.relations {
            if r.relation >= schema.relations.len()
                || r.from >= self.objects.len()
                || r.to >= self.objects.len()
                || r.from == r.to
            {
                return Err(Error::Argument("invalid scene relation".into()));
            }
        }
        Ok(())
    }

    fn hash_key(&self) -> u64 {
        let mut parts = Vec::with_capacity(self.objects.len() * 3 + self.relations.len() * 3 + 1);
        parts.push(self.objects.len() as u64);
        for o in &self.objects {
            parts.extend([o.shape as u64, o.color as u64, o.size as u64]);
        }
        for r in &self.relations {
            parts.extend([r.relation as u64 + 1000, r.from as u64, r.to as u64]);
        }
        seed::derive(0x5CE7E, &parts)
    }
}

/// Uniform over object count, attributes and one relation per consecutive
/// object pair; deterministic per seed.
pub fn generate_scene(schema: &AttributeSchema, rng_seed: u64) -> Scene {
    let mut rng = seed::rng(rng_seed, &[tag::SCENE]);
    let n = rng.random_range(1..=schema.max_objects);
    let objects = (0..n)
        .map(|_| Object {
            shape: rng.random_range(0..schema.shapes.len()),
            color: rng.random_range(0..schema.colors.len()),
            size: rng.random_range(0..schema.sizes.len()),
        })
        .collect();
    let relations = (1..n)
        .map(|k| Relation {
            relation: rng.random_range(0..schema.relations.len()),
            from: k - 1,
            to: k,
        })
        .collect();
    Scene { objects, relations }
}

/// Image stand-in: a finite feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedImage {
    pub features: Vec<f32>,
}

impl RenderedImage {
    pub fn to_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }
}

/// Fixed Gaussian random projection of the one-hot scene encoding.
#[derive(Debug, Clone)]
pub struct Renderer {
    schema: AttributeSchema,
    d_img: usize,
    encoding_dim: usize,
    projection: Vec<f64>,
}

impl Renderer {
    pub fn new(schema: &AttributeSchema, d_img: usize, projection_seed: u64) -> Result<Self> {
        schema.validate()?;
        if d_img == 0 {
            return Err(Error::Config("d_img must be positive".into()));
        }
        let m = schema.max_objects;
        let encoding_dim = m * Self::slot_width(schema) + m * m.saturating_sub(1) * schema.relations.len();
        // keeps feature variance near 1 for a full scene
        let active = (4 * m + m.saturating_sub(1)) as f64;
        let scale = 1.0 / active.sqrt();
        let mut rng = seed::rng(projection_seed, &[tag::PROJECTION]);
        let projection = (0..d_img * encoding_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            schema: schema.clone(),
            d_img,
            encoding_dim,
            projection,
        })
    }

    fn slot_width(schema: &AttributeSchema) -> usize {
        1 + schema.shapes.len() + schema.colors.len() + schema.sizes.len()
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    /// Concatenated one-hot encoding: per object slot `[present | shape | color | size]`,
    /// then one relation block per ordered slot pair.
    pub fn encode(&self, scene: &Scene) -> Vec<f64> {
        let s = &self.schema;
        let w = Self::slot_width(s);
        let m = s.max_objects;
        let mut v = vec![0.0; self.encoding_dim];
        for (k, o) in scene.objects.iter().enumerate() {
            let base = k * w;
            v[base] = 1.0;
            v[base + 1 + o.shape] = 1.0;
            v[base + 1 + s.shapes.len() + o.color] = 1.0;
            v[base + 1 + s.shapes.len() + s.colors.len() + o.size] = 1.0;
        }
        let rel_base = m * w;
        for r in &scene.relations {
            let pair = r.from * (m - 1) + if r.to > r.from { r.to - 1 } else { r.to };
            v[rel_base + pair * s.relations.len() + r.relation] = 1.0;
        }
        v
    }

    pub fn render(&self, scene: &Scene, noise_std: f64, rng_seed: u64) -> Result<RenderedImage> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::Argument(format!("noise_std must be >= 0, got {noise_std}")));
        }
        scene.validate(&self.schema)?;
        let enc = self.encode(scene);
        let mut features: Vec<f64> = (0..self.d_img)
            .map(|r| {
                self.projection[r * self.encoding_dim..(r + 1) * self.encoding_dim]
                    .iter()
                    .zip(&enc)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Argument(e.to_string()))?;
            let mut rng = seed::rng(rng_seed, &[tag::NOISE]);
            features.iter_mut().for_each(|f| *f += normal.sample(&mut rng));
        }
        Ok(RenderedImage {
            features: features.into_iter().map(|v| v as f32).collect(),
        })
    }
}

const FUNCTION_WORDS: [(&str, PosTag); 3] = [("a", PosTag::Det), ("the", PosTag::Det), ("is", PosTag::Verb)];

/// Template grammar over a schema; every terminal carries exactly one tag.
#[derive(Debug, Clone)]
pub struct Grammar {
    schema: AttributeSchema,
}

impl Grammar {
    pub fn new(schema: &AttributeSchema) -> Result<Self> {
        schema.validate()?;
        Ok(Self { schema: schema.clone() })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn tag(&self, word: &str) -> Option<PosTag> {
        let s = &self.schema;
        if let Some((_, t)) = FUNCTION_WORDS.iter().find(|(w, _)| *w == word) {
            Some(*t)
        } else if s.shapes.iter().any(|w| w == word) {
            Some(PosTag::Noun)
        } else if s.colors.iter().chain(&s.sizes).any(|w| w == word) {
            Some(PosTag::Adj)
        } else if s.relations.iter().any(|w| w == word) {
            Some(PosTag::Adp)
        } else {
            None
        }
    }

    fn object_phrase<'a>(&'a self, det: &'a str, o: &Object, out: &mut Vec<&'a str>) {
        let s = &self.schema;
        out.extend([det, &s.sizes[o.size], &s.colors[o.color], &s.shapes[o.shape]]);
    }

    /// Template realisation. One object: `a <size> <color> <shape>`. With a
    /// relation: `<det> <object> is <relation> a <object>`, where the seed
    /// picks `a` or `the` for the leading determiner.
    pub fn caption_words(&self, scene: &Scene, grammar_seed: u64) -> Vec<(String, PosTag)> {
        let mut words = Vec::new();
        match scene.relations.first() {
            None => self.object_phrase("a", &scene.objects[0], &mut words),
            Some(r) => {
                let variant = seed::derive(grammar_seed, &[tag::GRAMMAR, scene.hash_key()]) % 2;
                let det = if variant == 0 { "a" } else { "the" };
                self.object_phrase(det, &scene.objects[r.from], &mut words);
                words.push("is");
                words.push(&self.schema.relations[r.relation]);
                self.object_phrase("a", &scene.objects[r.to], &mut words);
            }
        }
        words
            .into_iter()
            .map(|w| (w.to_string(), self.tag(w).expect("grammar terminal has a tag")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub pos_tags: Vec<PosTag>,
}

impl Caption {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Dense id <-> token map with reserved `<pad>`, `<bos>`, `<eos>` at 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        let distinct: BTreeSet<&str> = words.into_iter().collect();
        let mut tokens = strings(&[PAD_TOKEN, BOS_TOKEN, EOS_TOKEN]);
        tokens.extend(distinct.into_iter().map(str::to_string));
        if tokens.len() > cap {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, cap is {cap}",
                tokens.len()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id <= EOS
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Id -> tag table for every token; reserved tokens are untagged.
    pub fn tag_table(&self, grammar: &Grammar) -> Vec<Option<PosTag>> {
        self.tokens.iter().map(|t| grammar.tag(t)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = BufReader::new(File::open(path)?)
            .lines()
            .collect::<std::io::Result<_>>()?;
        if tokens.len() < 3 || tokens[PAD] != PAD_TOKEN || tokens[BOS] != BOS_TOKEN || tokens[EOS] != EOS_TOKEN {
            return Err(Error::Format("vocabulary file lacks reserved tokens".into()));
        }
        Ok(Self { tokens })
    }
}

pub fn caption_scene(grammar: &Grammar, vocab: &Vocabulary, scene: &Scene, grammar_seed: u64) -> Result<Caption> {
    let words = grammar.caption_words(scene, grammar_seed);
    let mut tokens = Vec::with_capacity(words.len());
    let mut pos_tags = Vec::with_capacity(words.len());
    for (w, t) in words {
        tokens.push(
            vocab
                .id(&w)
                .ok_or_else(|| Error::Config(format!("word `{w}` missing from vocabulary")))?,
        );
        pos_tags.push(t);
    }
    Ok(Caption { tokens, pos_tags })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: usize,
    pub scene: Scene,
    pub image: RenderedImage,
    pub caption: Caption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Item>,
    pub val: Vec<Item>,
    pub test: Vec<Item>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[Item] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub schema: AttributeSchema,
    pub n_items: usize,
    pub seed: u64,
    pub grammar_seed: u64,
    pub noise_std: f64,
    pub d_img: usize,
    pub vocab_cap: usize,
    /// Reject repeated scenes so no two items are indistinguishable.
    pub distinct_scenes: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            schema: AttributeSchema::default(),
            n_items: 10_000,
            seed: 7,
            grammar_seed: 11,
            noise_std: 0.05,
            d_img: 64,
            vocab_cap: 200,
            distinct_scenes: true,
        }
    }
}

/// A generated world: items split 80/10/10 plus the shared vocabulary.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub grammar: Grammar,
    pub vocab: Vocabulary,
    pub data: DatasetSplit,
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: usize,
    split: Split,
    scene: Scene,
    features: Vec<f32>,
    caption: Vec<usize>,
    pos: Vec<PosTag>,
}

pub fn build_dataset(config: &WorldConfig) -> Result<World> {
    let schema = &config.schema;
    schema.validate()?;
    if config.n_items < 10 {
        return Err(Error::Config(format!("n_items must be >= 10, got {}", config.n_items)));
    }
    let grammar = Grammar::new(schema)?;
    let renderer = Renderer::new(schema, config.d_img, config.seed)?;

    let mut scenes = Vec::with_capacity(config.n_items);
    let mut seen = HashSet::new();
    let max_attempts = config.n_items as u64 * 50;
    let mut attempt = 0u64;
    while scenes.len() < config.n_items {
        if attempt >= max_attempts {
            return Err(Error::Config(format!(
                "could not draw {} distinct scenes from the schema",
                config.n_items
            )));
        }
        let scene = generate_scene(schema, seed::derive(config.seed, &[tag::SCENE, attempt]));
        attempt += 1;
        if config.distinct_scenes && !seen.insert(scene.clone()) {
            continue;
        }
        scenes.push(scene);
    }

    let words: Vec<Vec<(String, PosTag)>> = scenes
        .iter()
        .map(|s| grammar.caption_words(s, config.grammar_seed))
        .collect();
    let vocab = Vocabulary::from_words(words.iter().flatten().map(|(w, _)| w.as_str()), config.vocab_cap)?;

    let n_train = config.n_items * 8 / 10;
    let n_val = config.n_items / 10;
    let mut data = DatasetSplit {
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test: Vec::new(),
        seed: config.seed,
    };
    for (id, scene) in scenes.into_iter().enumerate() {
        let image = renderer.render(&scene, config.noise_std, seed::derive(config.seed, &[tag::NOISE, id as u64]))?;
        let caption = caption_scene(&grammar, &vocab, &scene, config.grammar_seed)?;
        let item = Item { id, scene, image, caption };
        if id < n_train {
            data.train.push(item);
        } else if id < n_train + n_val {
            data.val.push(item);
        } else {
            data.test.push(item);
        }
    }
    Ok(World {
        config: config.clone(),
        grammar,
        vocab,
        data,
    })
}

impl World {
    pub fn items(&self, split: Split) -> &[Item] {
        self.data.get(split)
    }

    pub fn all_items(&self) -> impl Iterator<Item = (Split, &Item)> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .flat_map(move |s| self.items(s).iter().map(move |i| (s, i)))
    }

    pub fn tag_table(&self) -> Vec<Option<PosTag>> {
        self.vocab.tag_table(&self.grammar)
    }

    /// Line-delimited JSON corpus, one item per line in id order.
    pub fn write_corpus(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (split, item) in self.all_items() {
            let rec = CorpusRecord {
                id: item.id,
                split,
                scene: item.scene.clone(),
                features: item.image.features.clone(),
                caption: item.caption.tokens.clone(),
                pos: item.caption.pos_tags.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_corpus(&dir.join(CORPUS_FILE))?;
        self.vocab.write(&dir.join(VOCAB_FILE))
    }

    /// Reads a corpus written by [`World::save`]; `config` supplies the schema.
    pub fn load(dir: &Path, config: &WorldConfig) -> Result<Self> {
        let grammar = Grammar::new(&config.schema)?;
        let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
        let mut data = DatasetSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            seed: config.seed,
        };
        for line in BufReader::new(File::open(dir.join(CORPUS_FILE))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)?;
            rec.scene.validate(&config.schema)?;
            if rec.caption.iter().any(|&t| t >= vocab.len()) || rec.caption.len() != rec.pos.len() {
                return Err(Error::Format(format!("item {} has an invalid caption", rec.id)));
            }
            let item = Item {
                id: rec.id,
                scene: rec.scene,
                image: RenderedImage { features: rec.features },
                caption: Caption {
                    tokens: rec.caption,
                    pos_tags: rec.pos,
                },
            };
            match rec.split {
                Split::Train => data.train.push(item),
                Split::Val => data.val.push(item),
                Split::Test => data.test.push(item),
            }
        }
        Ok(Self {
            config: config.clone(),
            grammar,
            vocab,
            data,
        })
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// 64-bit content hash (leading bytes of SHA-256) of a file.
pub fn file_fingerprint(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    Ok(bytes_fingerprint(&bytes))
}

pub fn bytes_fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(shape: usize, color: usize, size: usize) -> Scene {
        Scene {
            objects: vec![Object { shape, color, size }],
            relations: vec![],
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let s = AttributeSchema::default();
        assert_eq!(generate_scene(&s, 42), generate_scene(&s, 42));
        for seed in 0..200 {
            generate_scene(&s, seed).validate(&s).unwrap();
        }
    }

    #[test]
    fn forced_schema_gives_unique_scene() {
        let s = AttributeSchema {
            shapes: strings(&["circle"]),
            colors: strings(&["red"]),
            sizes: strings(&["small"]),
            relations: strings(&["above"]),
            max_objects: 1,
        };
        for seed in 0..20 {
            assert_eq!(generate_scene(&s, seed), single(0, 0, 0));
        }
    }

    #[test]
    fn color_frequencies_within_binomial_bound() {
        let s = AttributeSchema {
            colors: strings(&["red", "blue"]),
            max_objects: 1,
            ..AttributeSchema::default()
        };
        let n = 10_000;
        let red = (0..n).filter(|&i| generate_scene(&s, i).objects[0].color == 0).count() as f64;
        // Binomial(n, 1/2): mean n/2, sd sqrt(n)/2
        let sd = (n as f64).sqrt() / 2.0;
        assert!((red - n as f64 / 2.0).abs() <= 3.0 * sd, "red count {red}");
    }

    #[test]
    fn rejects_bad_schema() {
        let mut s = AttributeSchema::default();
        s.max_objects = 0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = AttributeSchema::default();
        s.colors.push("circle".into());
        assert!(s.validate().is_err());
        let mut s = AttributeSchema::default();
        s.sizes.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn render_is_pure_without_noise_and_rejects_negative_noise() {
        let s = AttributeSchema::default();
        let r = Renderer::new(&s, 64, 3).unwrap();
        let scene = generate_scene(&s, 5);
        assert_eq!(r.render(&scene, 0.0, 1).unwrap(), r.render(&scene, 0.0, 2).unwrap());
        assert!(matches!(r.render(&scene, -0.1, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn one_attribute_change_breaks_cosine_identity() {
        let s = AttributeSchema::default();
        let r = Renderer::new(&s, 64, 3).unwrap();
        let a = r.render(&single(0, 0, 0), 0.0, 0).unwrap().to_f64();
        for other in [single(1, 0, 0), single(0, 1, 0), single(0, 0, 1)] {
            let b = r.render(&other, 0.0, 0).unwrap().to_f64();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(dot / (na * nb) < 1.0 - 1e-9);
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let s = AttributeSchema::default();
        let r = Renderer::new(&s, 16, 3).unwrap();
        let scene = generate_scene(&s, 1);
        let clean = r.render(&scene, 0.0, 0).unwrap().to_f64();
        let renders: Vec<Vec<f64>> = (0..1000).map(|i| r.render(&scene, 0.1, i).unwrap().to_f64()).collect();
        for d in 0..16 {
            let xs: Vec<f64> = renders.iter().map(|v| v[d] - clean[d]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            let sd = var.sqrt();
            assert!((0.08..=0.12).contains(&sd), "coordinate {d}: sd {sd}");
        }
    }

    #[test]
    fn single_object_caption() {
        let s = AttributeSchema::default();
        let g = Grammar::new(&s).unwrap();
        // small red circle
        let words = g.caption_words(&single(0, 0, 0), 0);
        let text: Vec<&str> = words.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(text, vec!["a", "small", "red", "circle"]);
        let tags: Vec<PosTag> = words.iter().map(|(_, t)| *t).collect();
        assert_eq!(tags, vec![PosTag::Det, PosTag::Adj, PosTag::Adj, PosTag::Noun]);
    }

    #[test]
    fn related_caption_has_one_adposition_and_copula() {
        let s = AttributeSchema::default();
        let g = Grammar::new(&s).unwrap();
        let scene = Scene {
            objects: vec![
                Object { shape: 0, color: 0, size: 0 },
                Object { shape: 1, color: 2, size: 1 },
            ],
            relations: vec![Relation { relation: 0, from: 0, to: 1 }],
        };
        for grammar_seed in 0..10 {
            let words = g.caption_words(&scene, grammar_seed);
            assert_eq!(words.iter().filter(|(_, t)| *t == PosTag::Adp).count(), 1);
            assert_eq!(words.iter().filter(|(_, t)| *t == PosTag::Verb).count(), 1);
            assert!(words.iter().any(|(w, _)| w == "left-of"));
            assert!(words.len() <= MAX_UTTERANCE_LEN);
        }
    }

    #[test]
    fn pos_tag_parsing() {
        assert_eq!("noun".parse::<PosTag>().unwrap(), PosTag::Noun);
        assert!(matches!("PRON".parse::<PosTag>(), Err(Error::Argument(_))));
    }

    #[test]
    fn vocabulary_cap_enforced() {
        assert!(matches!(
            Vocabulary::from_words(["x", "y"], 4),
            Err(Error::Config(_))
        ));
        let v = Vocabulary::from_words(["b", "a", "b"], 10).unwrap();
        assert_eq!(v.tokens(), &[PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, "a", "b"]);
    }

    #[test]
    fn small_dataset_split_and_vocab() {
        let cfg = WorldConfig {
            n_items: 300,
            ..WorldConfig::default()
        };
        let w = build_dataset(&cfg).unwrap();
        assert_eq!((w.data.train.len(), w.data.val.len(), w.data.test.len()), (240, 30, 30));
        assert!(w.vocab.len() <= 30);
        let tags = w.tag_table();
        for (_, item) in w.all_items() {
            assert_eq!(item.caption.tokens.len(), item.caption.pos_tags.len());
            for (t, p) in item.caption.tokens.iter().zip(&item.caption.pos_tags) {
                assert_eq!(tags[*t], Some(*p));
            }
        }
        assert!(matches!(
            build_dataset(&WorldConfig { n_items: 5, ..cfg.clone() }),
            Err(Error::Config(_))
        ));
    }
}
