//! Synthetic corpora and a content-driven mock LLM shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use bundlekd::gateway::{ChatRequest, MockProvider, MockScript};
use bundlekd_core::{Bundle, Dataset, Domain, Item, Session};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Themes: intent plus the categories that make up its bundles.
pub const THEMES: [(&str, &str, [&str; 3]); 6] = [
    ("gaming", "build a gaming rig", ["GPU", "CPU", "Motherboard"]),
    ("office", "furnish a home office", ["Office Chair", "Monitor", "Desk Lamp"]),
    ("travel", "pack for a long trip", ["Suitcase", "Neck Pillow", "Travel Adapter"]),
    ("coffee", "brew coffee at home", ["Coffee Beans", "Grinder", "Kettle"]),
    ("audio", "listen to music on the go", ["Headphones", "DAC", "Headphone Case"]),
    ("photo", "start shooting photos", ["Camera", "Lens", "Tripod"]),
];

pub const NOISE: [&str; 4] = ["Batteries", "Cable Ties", "Notebook", "Sticker Pack"];

pub fn theme_of(category: &str) -> Option<usize> {
    THEMES.iter().position(|(_, _, cats)| cats.contains(&category))
}

pub fn synthetic_corpus(n: usize, seed: u64) -> Dataset {
    corpus_with(n, seed, 3)
}

/// Sessions of 1 to `max_themes` themed bundles (2 or 3 items each) plus up
/// to 2 noise items, shuffled.
pub fn corpus_with(n: usize, seed: u64, max_themes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sessions = (0..n)
        .map(|k| {
            let id = format!("s{k:04}");
            let mut themes: Vec<usize> = (0..THEMES.len()).collect();
            themes.shuffle(&mut rng);
            themes.truncate(rng.random_range(1..=max_themes.min(THEMES.len())));
            let mut items = Vec::new();
            let mut groups = Vec::new();
            for &t in &themes {
                let (_, _, cats) = THEMES[t];
                let take = rng.random_range(2..=3);
                let mut group = Vec::new();
                for cat in cats.iter().take(take) {
                    let item_id = format!("{id}-i{}", items.len());
                    items.push(Item { id: item_id.clone(), title: format!("{cat} model {}", rng.random_range(100..999)), category: (*cat).into() });
                    group.push(item_id);
                }
                groups.push((t, group));
            }
            for _ in 0..rng.random_range(0..=2) {
                let cat = NOISE[rng.random_range(0..NOISE.len())];
                items.push(Item { id: format!("{id}-i{}", items.len()), title: format!("{cat} pack"), category: cat.into() });
            }
            items.shuffle(&mut rng);
            let bundles = groups
                .into_iter()
                .enumerate()
                .map(|(b, (t, item_ids))| Bundle { id: format!("{id}-b{b}"), item_ids, intent: Some(THEMES[t].1.into()) })
                .collect();
            Session { id, user_id: format!("u{}", k % 7), items, bundles }
        })
        .collect();
    Dataset::new(Domain::Electronic, sessions).expect("synthetic corpus is valid")
}

/// `(position, category)` for each `productN: category, title` line.
fn product_lines(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("product")?;
            let (n, rest) = rest.split_once(": ")?;
            let (cat, _) = rest.split_once(", ")?;
            Some((n.parse().ok()?, cat.to_string()))
        })
        .collect()
}

fn themed_groups(text: &str, limit: usize) -> BTreeMap<usize, Vec<usize>> {
    themed_categories(text).into_iter().map(|(t, g)| (t, g.into_iter().map(|(p, _)| p).take(limit).collect())).collect()
}

/// Theme to `(position, category)` of its products, themes with 2+ only.
fn themed_categories(text: &str) -> BTreeMap<usize, Vec<(usize, String)>> {
    let mut groups: BTreeMap<usize, Vec<(usize, String)>> = BTreeMap::new();
    for (pos, cat) in product_lines(text) {
        if let Some(t) = theme_of(&cat) {
            groups.entry(t).or_default().push((pos, cat));
        }
    }
    groups.retain(|_, g| g.len() >= 2);
    groups
}

fn sorted_join(mut cats: Vec<String>) -> String {
    cats.sort();
    cats.join(", ")
}

fn bundles_json(groups: &BTreeMap<usize, Vec<usize>>) -> String {
    let map: serde_json::Map<String, serde_json::Value> = groups
        .values()
        .enumerate()
        .map(|(k, g)| (format!("bundle{}", k + 1), g.iter().map(|p| format!("product{p}")).collect()))
        .collect();
    serde_json::Value::Object(map).to_string()
}

/// Teacher and student behaviour keyed on the prompt text. Zero-shot answers
/// keep only two products per theme; with KNOWLEDGE every themed product is
/// grouped. Rules and thoughts are functions of the categories involved, so
/// sessions with equal category groups give equal text.
pub fn respond(req: &ChatRequest) -> Option<String> {
    let last = &req.messages.last()?.content;
    if last.starts_with("A bundle can be") {
        return Some(bundles_json(&themed_groups(last, 2)));
    }
    if last.starts_with("- You will be given") {
        return Some(bundles_json(&themed_groups(last, usize::MAX)));
    }
    if last.starts_with("Compare the correct bundles") {
        return Some(r#"{"1": ["a product was left out of its bundle"]}"#.into());
    }
    if last.starts_with("Review your bundle") {
        return Some(r#"{"1": ["Product Relationships", "complementary items were split"]}"#.into());
    }
    if last.starts_with("Based on your analysis") {
        let first = &req.messages.first()?.content;
        let groups = themed_categories(first);
        let mut texts: Vec<String> = groups
            .iter()
            .map(|(t, g)| {
                let cats = sorted_join(g.iter().map(|(_, c)| c.clone()).collect());
                format!("Bundle {cats} together when shoppers want to {}", THEMES[*t].1)
            })
            .collect();
        let names: Vec<&str> = groups.keys().map(|t| THEMES[*t].0).collect();
        for (k, a) in names.iter().enumerate() {
            for b in &names[k + 1..] {
                texts.push(format!("Keep {a} products apart from {b} products"));
            }
        }
        let rules: serde_json::Map<String, serde_json::Value> =
            texts.into_iter().enumerate().map(|(k, t)| (format!("rule{}", k + 1), serde_json::json!([t]))).collect();
        return Some(serde_json::Value::Object(rules).to_string());
    }
    if last.starts_with("- You are provided with") {
        let json_after = |marker: &str, end: &str| -> Option<serde_json::Map<String, serde_json::Value>> {
            let start = last.find(marker)? + marker.len();
            let stop = last[start..].find(end)? + start + 2;
            serde_json::from_str(&last[start..stop]).ok()
        };
        let products = json_after("with their categories: ", "}} 2. A list")?;
        let bundles = json_after("detected from the product list: ", "}}.\n")?;
        let thoughts: serde_json::Map<String, serde_json::Value> = bundles
            .iter()
            .map(|(key, b)| {
                let intent = b["intent"].as_str().unwrap_or_default();
                let cats = b["group"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(|p| products.get(p.as_str()?)?["category"].as_str().map(String::from))
                    .collect();
                let text = format!("Customers buying {} together are looking to {intent}.", sorted_join(cats));
                (key.clone(), serde_json::Value::from(text))
            })
            .collect();
        return Some(serde_json::Value::Object(thoughts).to_string());
    }
    None
}

/// Strict mock: anything the responder cannot answer is an error.
pub fn mock(name: &str) -> Arc<MockProvider> {
    Arc::new(MockProvider::new(name, MockScript { strict: true, ..Default::default() }).with_responder(respond))
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
