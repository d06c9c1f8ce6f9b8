//! Train/test split protocols.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{resolve_items, Catalog, UserRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Each user's final interaction is the single held-out target; the
    /// preceding prefix is training context.
    LeaveOneOut,
    /// Whole users are held out of training; their last interactions are
    /// the targets, the preceding prefix the context.
    ZeroShot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Users withheld entirely (zero-shot mode).
    pub holdout_users: usize,
    /// Held-out targets per zero-shot user.
    pub targets_per_user: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::LeaveOneOut,
            holdout_users: 200,
            targets_per_user: 3,
        }
    }
}

/// A training sequence (catalog indices, chronological).
#[derive(Debug, Clone)]
pub struct TrainSeq {
    pub user_id: String,
    pub items: Vec<usize>,
}

/// One evaluation case: rank the catalog given `context`, look for `targets`.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub user_id: String,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<TrainSeq>,
    pub eval: Vec<EvalCase>,
    /// Users dropped because their sequence was too short for the mode.
    pub skipped: usize,
}

pub fn split(users: &[UserRecord], catalog: &Catalog, spec: &SplitSpec) -> Result<Split> {
    if spec.targets_per_user < 1 {
        return Err(Error::Config("targets_per_user must be >= 1".to_string()));
    }
    match spec.mode {
        SplitMode::LeaveOneOut => split_leave_one_out(users, catalog),
        SplitMode::ZeroShot => split_zero_shot(users, catalog, spec),
    }
}

fn split_leave_one_out(users: &[UserRecord], catalog: &Catalog) -> Result<Split> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut skipped = 0;
    for user in users {
        let items = resolve_items(catalog, user)?;
        if items.len() < 2 {
            skipped += 1;
            continue;
        }
        let (context, target) = items.split_at(items.len() - 1);
        eval.push(EvalCase {
            user_id: user.user_id.clone(),
            context: context.to_vec(),
            targets: vec![target[0]],
        });
        if context.len() >= 2 {
            train.push(TrainSeq {
                user_id: user.user_id.clone(),
                items: context.to_vec(),
            });
        }
    }
    Ok(Split {
        train,
        eval,
        skipped,
    })
}

fn split_zero_shot(users: &[UserRecord], catalog: &Catalog, spec: &SplitSpec) -> Result<Split> {
    // Deterministic holdout choice: the first eligible users in id order.
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| users[a].user_id.cmp(&users[b].user_id));

    let mut holdout = Vec::new();
    let mut skipped = 0;
    let t = spec.targets_per_user;
    for &u in &order {
        if holdout.len() == spec.holdout_users {
            break;
        }
        if users[u].items.len() >= t + 1 {
            holdout.push(u);
        } else {
            skipped += 1;
        }
    }
    let holdout_set: std::collections::HashSet<usize> = holdout.iter().copied().collect();

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (u, user) in users.iter().enumerate() {
        let items = resolve_items(catalog, user)?;
        if holdout_set.contains(&u) {
            let (context, targets) = items.split_at(items.len() - t);
            eval.push(EvalCase {
                user_id: user.user_id.clone(),
                context: context.to_vec(),
                targets: targets.to_vec(),
            });
        } else if items.len() >= 2 {
            train.push(TrainSeq {
                user_id: user.user_id.clone(),
                items,
            });
        } else {
            skipped += 1;
        }
    }
    Ok(Split {
        train,
        eval,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;

    fn catalog(n: usize) -> Catalog {
        let items: Vec<ItemRecord> = (0..n)
            .map(|i| ItemRecord {
                item_id: format!("i{i}"),
                modalities: vec![vec![i as f64, 1.0]],
                title_emb: vec![1.0, 0.0],
                cf_emb: vec![0.0, 0.0],
                title_token_count: 5,
                genre_label: None,
            })
            .collect();
        Catalog::new(items).unwrap()
    }

    fn user(id: &str, items: &[&str]) -> UserRecord {
        UserRecord {
            user_id: id.to_string(),
            items: items.iter().map(|s| s.to_string()).collect(),
            timestamps: (0..items.len() as i64).collect(),
        }
    }

    #[test]
    fn leave_one_out_holds_out_last() {
        let cat = catalog(6);
        let users = vec![user("u1", &["i0", "i1", "i2"])];
        let s = split(&users, &cat, &SplitSpec::default()).unwrap();
        assert_eq!(s.eval.len(), 1);
        assert_eq!(s.eval[0].context, vec![0, 1]);
        assert_eq!(s.eval[0].targets, vec![2]);
        assert_eq!(s.train[0].items, vec![0, 1]);
    }

    #[test]
    fn leave_one_out_skips_short_users() {
        let cat = catalog(3);
        let users = vec![user("u1", &["i0"]), user("u2", &["i0", "i1"])];
        let s = split(&users, &cat, &SplitSpec::default()).unwrap();
        assert_eq!(s.skipped, 1);
        assert_eq!(s.eval.len(), 1);
    }

    #[test]
    fn zero_shot_takes_last_three_targets() {
        let cat = catalog(6);
        let users = vec![
            user("a", &["i0", "i1", "i2", "i3", "i4", "i5"]),
            user("b", &["i0", "i1", "i2", "i3"]),
        ];
        let spec = SplitSpec {
            mode: SplitMode::ZeroShot,
            holdout_users: 1,
            targets_per_user: 3,
        };
        let s = split(&users, &cat, &spec).unwrap();
        assert_eq!(s.eval.len(), 1);
        assert_eq!(s.eval[0].user_id, "a");
        assert_eq!(s.eval[0].context, vec![0, 1, 2]);
        assert_eq!(s.eval[0].targets, vec![3, 4, 5]);
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.train[0].user_id, "b");
    }

    #[test]
    fn zero_shot_holdout_disjoint_from_training() {
        let cat = catalog(8);
        let users: Vec<UserRecord> = (0..10)
            .map(|u| {
                let ids: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
                UserRecord {
                    user_id: format!("u{u:02}"),
                    items: ids,
                    timestamps: (0..6).collect(),
                }
            })
            .collect();
        let spec = SplitSpec {
            mode: SplitMode::ZeroShot,
            holdout_users: 4,
            targets_per_user: 3,
        };
        let s = split(&users, &cat, &spec).unwrap();
        let eval_ids: std::collections::HashSet<_> =
            s.eval.iter().map(|e| e.user_id.clone()).collect();
        let train_ids: std::collections::HashSet<_> =
            s.train.iter().map(|t| t.user_id.clone()).collect();
        assert_eq!(eval_ids.len(), 4);
        assert!(eval_ids.is_disjoint(&train_ids));
    }

    #[test]
    fn no_target_leaks_into_its_context() {
        let cat = catalog(8);
        let users = vec![user("u", &["i0", "i1", "i2", "i3", "i4"])];
        let s = split(&users, &cat, &SplitSpec::default()).unwrap();
        for case in &s.eval {
            for t in &case.targets {
                // The target position is excluded; the same catalog item may
                // legitimately recur earlier, but not here by construction.
                assert_eq!(case.context.len(), 4);
                assert!(!case.context[3..].contains(t));
            }
        }
    }
}
