use std::fmt::Write;

use workmem::episodic::{Activity, EpisodicBank, Narrative};
use workmem::semantic::TripleStore;
use workmem::transcript::format_datetime;

fn fragment_line(out: &mut String, n: &Narrative, i: usize, indent: &str) {
    let f = &n.fragments[i];
    let ids: Vec<&str> = f.source_turn_ids.iter().map(String::as_str).collect();
    let _ = writeln!(out, "{indent}- ({}) {}: {} [{}]", format_datetime(&f.timestamp), f.speaker, f.content, ids.join(", "));
}

/// Headline, then subplots with their fragments, then anything not yet
/// consolidated.
pub fn narrative_tree(n: &Narrative) -> String {
    let mut out = String::new();
    let activity = match n.activity {
        Activity::Active => "active",
        Activity::Inactive => "inactive",
    };
    let _ = writeln!(
        out,
        "{} [{}] {} ({activity}, {} fragments, last bound at {})",
        n.narrative_id,
        n.owner,
        n.headline,
        n.fragments.len(),
        n.last_bound_iteration
    );
    let mut covered = 0;
    for s in &n.subplots {
        for i in covered..s.start {
            fragment_line(&mut out, n, i, "  ");
        }
        let _ = writeln!(out, "  + {} (fragments {}..{}, iteration {})", s.sub_headline, s.start, s.end, s.created_at_iteration);
        for i in s.start..s.end {
            fragment_line(&mut out, n, i, "      ");
        }
        covered = s.end;
    }
    if covered < n.fragments.len() {
        if !n.subplots.is_empty() {
            let _ = writeln!(out, "  + (no subplot yet)");
        }
        let indent = if n.subplots.is_empty() { "  " } else { "      " };
        for i in covered..n.fragments.len() {
            fragment_line(&mut out, n, i, indent);
        }
    }
    out
}

pub fn bank_tree(bank: &EpisodicBank, only: Option<&str>) -> String {
    bank.narratives
        .iter()
        .filter(|n| only.is_none_or(|id| n.narrative_id == id))
        .map(narrative_tree)
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn facts(store: &TripleStore) -> String {
    let mut out = String::new();
    for f in store.facts() {
        let _ = writeln!(out, "({}) {} [{}]", format_datetime(&f.timestamp), f.display(), f.source_narrative_id);
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use chrono::NaiveDate;
    use workmem::episodic::{MemoryFragment, SubplotNode};

    use super::*;

    fn frag(i: u32) -> MemoryFragment {
        let ts = NaiveDate::from_ymd_opt(2023, 5, 8).unwrap().and_hms_opt(13, i, 0).unwrap();
        MemoryFragment {
            fragment_id: format!("f{i}"),
            timestamp: ts,
            speaker: "Maya".into(),
            content: format!("event {i}"),
            source_turn_ids: BTreeSet::from([format!("s1t{i}")]),
            bound_at_iteration: u64::from(i),
        }
    }

    #[test]
    fn tree_groups_fragments_under_subplots() {
        let n = Narrative {
            narrative_id: "n001".into(),
            owner: "Maya".into(),
            characters: vec![],
            headline: "Running".into(),
            fragments: (1..=4).map(frag).collect(),
            subplots: vec![SubplotNode { sub_headline: "First race".into(), start: 0, end: 2, created_at_iteration: 9 }],
            activity: Activity::Inactive,
            last_bound_iteration: 4,
            consolidated_through: 2,
        };
        let t = narrative_tree(&n);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("n001 [Maya] Running (inactive, 4 fragments"));
        assert_eq!(lines[1], "  + First race (fragments 0..2, iteration 9)");
        assert!(lines[2].starts_with("      - ") && lines[2].ends_with("Maya: event 1 [s1t1]"));
        assert_eq!(lines[4], "  + (no subplot yet)");
        assert_eq!(lines.len(), 7);
    }
}
