//! The session and knowledge behind the golden prompt files, shared with
//! the acceptance run in the `bundlekd` crate.
#![allow(dead_code)]

use std::collections::BTreeMap;

use bundlekd_core::evaluator::ItemSet;
use bundlekd_core::knowledge::KnowledgeSection;
use bundlekd_core::prompting::{
    compare_bindings, render_icl, render_reflection_step, render_thought_prompt, render_zero_shot,
};
use bundlekd_core::sft::{build_samples, AugmentationPolicy};
use bundlekd_core::{
    Bundle, CompositeKnowledge, Dataset, Domain, Item, KnowledgeEntry, KnowledgeFormat, Pattern,
    RuleKnowledge, Session, ThoughtKnowledge,
};

fn item(id: &str, category: &str, title: &str) -> Item {
    Item { id: id.into(), title: title.into(), category: category.into() }
}

pub fn fixture() -> Session {
    Session {
        id: "sess-42".into(),
        user_id: "u7".into(),
        items: vec![
            item("B001", "Laptop", "UltraBook 14\" {2024 edition}"),
            item("B002", "Laptop Bag", "Padded sleeve, fits 13-15 inch"),
            item("B003", "Mouse", "Wireless mouse\nwith USB receiver"),
            item("B004", "Headphones", "Over-ear noise cancelling headphones"),
        ],
        bundles: vec![
            Bundle {
                id: "gt-a".into(),
                item_ids: vec!["B002".into(), "B001".into(), "B003".into()],
                intent: Some("set up a portable workstation".into()),
            },
            Bundle { id: "gt-b".into(), item_ids: vec!["B001".into(), "B004".into()], intent: None },
        ],
    }
}

fn rule(text: &str) -> KnowledgeEntry {
    KnowledgeEntry::Rule(RuleKnowledge { text: text.into(), source_session_id: "sess-7".into(), domain: Domain::Electronic })
}

fn thought(text: &str) -> KnowledgeEntry {
    KnowledgeEntry::Thought(ThoughtKnowledge {
        text: text.into(),
        source_session_id: "sess-7".into(),
        source_bundle_id: "b1".into(),
        domain: Domain::Electronic,
    })
}

pub fn patterns() -> KnowledgeSection {
    KnowledgeSection {
        format: KnowledgeFormat::Pattern,
        entries: vec![
            KnowledgeEntry::Pattern(Pattern::new(["Laptop", "Laptop Bag"], 5)),
            KnowledgeEntry::Pattern(Pattern::new(["Laptop", "Mouse"], 3)),
        ],
    }
}

pub fn rules() -> KnowledgeSection {
    KnowledgeSection {
        format: KnowledgeFormat::Rule,
        entries: vec![
            rule("Group a device with accessories that protect or extend it."),
            rule("Do not bundle products\nwith unrelated intents."),
        ],
    }
}

pub fn thoughts() -> KnowledgeSection {
    KnowledgeSection {
        format: KnowledgeFormat::Thought,
        entries: vec![thought("Customers buying Laptop and Mouse are typically looking to work on the go.")],
    }
}

pub fn detected() -> Vec<ItemSet> {
    vec![
        ["B001", "B002"].iter().map(|x| x.to_string()).collect(),
        ["B003", "B004"].iter().map(|x| x.to_string()).collect(),
    ]
}

/// Every golden file name with its current render.
pub fn renders() -> Vec<(&'static str, String)> {
    let s = fixture();
    let icl = |sections: Vec<KnowledgeSection>| render_icl(&s, &CompositeKnowledge { sections }).text().to_string();
    let step = |n: u8, b: &BTreeMap<String, String>| render_reflection_step(n, b).unwrap().text().to_string();
    let d = Dataset::new(Domain::Electronic, vec![fixture()]).unwrap();
    let sft = build_samples(&d, |_| Ok::<_, std::convert::Infallible>(None), &AugmentationPolicy::default(), 0).unwrap();
    let lines: Vec<String> = sft.samples.iter().map(|x| serde_json::to_string(x).unwrap()).collect();
    vec![
        ("zero_shot.txt", render_zero_shot(&s).text().to_string()),
        ("icl_all_formats.txt", icl(vec![patterns(), rules(), thoughts()])),
        ("icl_rules_only.txt", icl(vec![rules()])),
        ("icl_pattern_only.txt", icl(vec![patterns()])),
        ("reflect_step2.txt", step(2, &compare_bindings(&s, &detected()))),
        ("reflect_step3.txt", step(3, &BTreeMap::new())),
        ("reflect_step4.txt", step(4, &BTreeMap::new())),
        ("thought.txt", render_thought_prompt(&s).text().to_string()),
        ("sft_zero_shot.jsonl", lines.join("\n") + "\n"),
    ]
}
