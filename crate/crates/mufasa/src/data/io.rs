//! Line-delimited corpus files: one JSON object per line.
//!
//! Two files make a corpus. The exact field names are part of the format
//! and covered by round-trip tests (see also `docs/data-format.md`):
//!
//! * items: `item_id`, `modalities` (M rows of d floats), `title_emb`,
//!   `cf_emb`, `title_token_count`, optional `genre_label`;
//! * interactions: `user_id`, `items` (ordered item ids), `timestamps`
//!   (monotone non-decreasing, same length).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Catalog, ItemRecord, UserRecord};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in catalog.items() {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::Config(format!("serialize item: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ItemRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(parse_err(path, 0, "catalog file has no items"));
    }
    // Re-map structural errors to the offending file.
    Catalog::new(items).map_err(|e| match e {
        Error::DimensionMismatch { context, left, right } => Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("dimension mismatch in {context}: {left:?} vs {right:?}"),
        },
        other => other,
    })
}

pub fn save_interactions(path: &Path, users: &[UserRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for user in users {
        serde_json::to_writer(&mut w, user)
            .map_err(|e| Error::Config(format!("serialize user: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load and validate user records against a catalog: referenced items must
/// exist, timestamps must be monotone non-decreasing and aligned.
pub fn load_interactions(path: &Path, catalog: &Catalog) -> Result<Vec<UserRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut users = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let user: UserRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if !seen.insert(user.user_id.clone()) {
            return Err(parse_err(
                path,
                lineno,
                format!("duplicate user id `{}`", user.user_id),
            ));
        }
        if user.items.len() != user.timestamps.len() {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "user `{}` has {} items but {} timestamps",
                    user.user_id,
                    user.items.len(),
                    user.timestamps.len()
                ),
            ));
        }
        if user.timestamps.windows(2).any(|w| w[0] > w[1]) {
            return Err(parse_err(
                path,
                lineno,
                format!("user `{}` has non-monotone timestamps", user.user_id),
            ));
        }
        for id in &user.items {
            if catalog.index_of(id).is_none() {
                return Err(Error::UnknownItem {
                    item_id: id.clone(),
                    path: path.display().to_string(),
                    line: lineno,
                });
            }
        }
        users.push(user);
    }
    Ok(users)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};

    fn corpus() -> (Catalog, Vec<UserRecord>) {
        let cfg = SyntheticConfig {
            num_genres: 3,
            dim: 8,
            items_per_genre: 4,
            num_users: 6,
            seq_len_min: 5,
            seq_len_max: 12,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_records() {
        let (catalog, users) = corpus();
        let dir = tempfile::tempdir().unwrap();
        let items_path = dir.path().join("items.jsonl");
        let inter_path = dir.path().join("interactions.jsonl");
        save_catalog(&items_path, &catalog).unwrap();
        save_interactions(&inter_path, &users).unwrap();
        let catalog2 = load_catalog(&items_path).unwrap();
        let users2 = load_interactions(&inter_path, &catalog2).unwrap();
        assert_eq!(catalog.items(), catalog2.items());
        assert_eq!(users, users2);
    }

    #[test]
    fn empty_interactions_file_is_empty_user_set() {
        let (catalog, _) = corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.jsonl");
        std::fs::write(&path, "").unwrap();
        let users = load_interactions(&path, &catalog).unwrap();
        assert!(users.is_empty());
    }

    #[test]
    fn dangling_item_id_names_id_and_line() {
        let (catalog, _) = corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.jsonl");
        std::fs::write(
            &path,
            r#"{"user_id":"u1","items":["g00_i0000"],"timestamps":[0]}
{"user_id":"u2","items":["missing_item"],"timestamps":[0]}
"#,
        )
        .unwrap();
        let err = load_interactions(&path, &catalog).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing_item"), "{msg}");
        assert!(msg.contains(":2"), "{msg}");
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let (catalog, _) = corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.jsonl");
        std::fs::write(
            &path,
            r#"{"user_id":"u1","items":["g00_i0000","g00_i0001"],"timestamps":[5,1]}
"#,
        )
        .unwrap();
        let err = load_interactions(&path, &catalog).unwrap_err();
        assert!(err.to_string().contains("non-monotone"));
    }

    #[test]
    fn malformed_json_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        let err = load_catalog(&path).unwrap_err();
        assert!(err.to_string().contains(":1"));
    }
}
