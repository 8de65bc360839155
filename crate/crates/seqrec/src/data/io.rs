//! On-disk formats: catalog JSONL, interactions CSV, cluster-label CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{CatalogItem, InteractionLog, ItemCatalog};
use crate::error::{Error, Result};

/// One JSON object per line:
/// `{"item_id": 1, "title": "...", "text_feat": [...], "image_feat": [...]}`.
pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open catalog {}: {e}", path.display())))?;
    let mut items = Vec::new();
    let mut lines = Vec::new(); // original line number per item
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: CatalogItem = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("catalog line {}: {e}", idx + 1)))?;
        items.push(item);
        lines.push(idx + 1);
    }
    ItemCatalog::from_items(items, |pos| format!("catalog line {}", lines[pos]))
}

pub fn save_catalog(catalog: &ItemCatalog, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in catalog.items() {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct InteractionRow {
    user_id: usize,
    item_id: usize,
    ts: i64,
}

/// CSV with header `user_id,item_id,ts`. Rows are stably sorted by
/// (user_id, ts), so equal timestamps keep file order. User ids must come
/// out dense in `1..=num_users`.
pub fn load_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionLog> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open interactions {}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut rows: Vec<InteractionRow> = Vec::new();
    for (idx, row) in reader.deserialize().enumerate() {
        let row: InteractionRow =
            row.map_err(|e| Error::Data(format!("interactions line {}: {e}", idx + 2)))?;
        rows.push(row);
    }
    rows.sort_by_key(|r| (r.user_id, r.ts));

    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for row in rows {
        by_user.entry(row.user_id).or_default().push(row.item_id);
    }
    let num_users = by_user.len();
    for (&u, _) in &by_user {
        if u == 0 || u > num_users {
            return Err(Error::Data(format!(
                "user ids must be dense 1..={num_users}, found {u}"
            )));
        }
    }
    InteractionLog::from_sequences(by_user.into_values().collect(), catalog)
}

pub fn save_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["user_id", "item_id", "ts"])?;
    for (user_id, seq) in log.iter() {
        for (ts, item_id) in seq.iter().enumerate() {
            w.write_record([user_id.to_string(), item_id.to_string(), ts.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth `item_id,cluster` table emitted next to synthetic corpora.
pub fn save_item_clusters(clusters: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["item_id", "cluster"])?;
    for (idx, c) in clusters.iter().enumerate() {
        w.write_record([(idx + 1).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_item_clusters(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open clusters {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize().enumerate() {
        let (item_id, cluster): (usize, usize) =
            row.map_err(|e| Error::Data(format!("clusters line {}: {e}", idx + 2)))?;
        if item_id != out.len() + 1 {
            return Err(Error::Data(format!(
                "clusters line {}: expected item_id {}, got {item_id}",
                idx + 2,
                out.len() + 1
            )));
        }
        out.push(cluster);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::synth::{synth_generate, SynthSpec};
    use super::*;

    #[test]
    fn catalog_round_trips_through_jsonl() {
        let corpus = synth_generate(&SynthSpec {
            num_users: 5,
            num_items: 12,
            d_text: 4,
            d_image: 3,
            num_clusters: 3,
            signal_strength: 0.5,
            seed: 2,
            ..SynthSpec::default_dims()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.jsonl");
        save_catalog(&corpus.catalog, &path).unwrap();
        let loaded = load_catalog(&path).unwrap();
        assert_eq!(loaded, corpus.catalog);
    }

    #[test]
    fn interactions_round_trip_and_sort() {
        let corpus = synth_generate(&SynthSpec {
            num_users: 7,
            num_items: 10,
            d_text: 2,
            d_image: 2,
            num_clusters: 2,
            signal_strength: 0.3,
            seed: 4,
            ..SynthSpec::default_dims()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.csv");
        save_interactions(&corpus.log, &path).unwrap();
        let loaded = load_interactions(&path, &corpus.catalog).unwrap();
        assert_eq!(loaded, corpus.log);
    }

    #[test]
    fn out_of_order_rows_are_sorted_by_user_and_ts() {
        let dir = tempfile::tempdir().unwrap();
        let cat_path = dir.path().join("cat.jsonl");
        let mut f = File::create(&cat_path).unwrap();
        for i in 1..=3 {
            writeln!(
                f,
                r#"{{"item_id": {i}, "title": "t{i}", "text_feat": [0.0], "image_feat": [0.0]}}"#
            )
            .unwrap();
        }
        let catalog = load_catalog(&cat_path).unwrap();

        let path = dir.path().join("log.csv");
        std::fs::write(
            &path,
            "user_id,item_id,ts\n1,3,30\n1,1,10\n1,2,20\n1,2,40\n",
        )
        .unwrap();
        let log = load_interactions(&path, &catalog).unwrap();
        assert_eq!(log.sequence(1), &[1, 2, 3, 2]);
    }

    #[test]
    fn catalog_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"item_id": 1, "title": "a", "text_feat": [0.0], "image_feat": [0.0]}"#,
                "\n",
                r#"{"item_id": 1, "title": "b", "text_feat": [0.0], "image_feat": [0.0]}"#,
                "\n",
            ),
        )
        .unwrap();
        let err = load_catalog(&path).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn unknown_item_reference_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cat_path = dir.path().join("cat.jsonl");
        std::fs::write(
            &cat_path,
            r#"{"item_id": 1, "title": "a", "text_feat": [0.0], "image_feat": [0.0]}"#,
        )
        .unwrap();
        let catalog = load_catalog(&cat_path).unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(&path, "user_id,item_id,ts\n1,9,0\n").unwrap();
        let err = load_interactions(&path, &catalog).unwrap_err().to_string();
        assert!(err.contains("unknown item 9"), "{err}");
    }

    #[test]
    fn cluster_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.csv");
        save_item_clusters(&[0, 1, 1, 2], &path).unwrap();
        assert_eq!(load_item_clusters(&path).unwrap(), vec![0, 1, 1, 2]);
    }
}
