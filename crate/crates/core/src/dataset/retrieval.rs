use std::cmp::Ordering;

use super::{SceneDatabase, Split};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).abs().sum()
}

impl SceneDatabase {
    /// Ranks train records by descending descriptor similarity, ties broken
    /// by id. `exclude` drops one record index; `near` keeps only records whose
    /// camera center is within the given L1 distance of a point.
    pub fn rank_train(
        &self,
        descriptor: &[f64],
        exclude: Option<usize>,
        near: Option<(Vec3, f64)>,
    ) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .records()
            .iter()
            .enumerate()
            .filter(|(i, r)| r.split == Split::Train && Some(*i) != exclude)
            .filter(|(_, r)| near.map_or(true, |(c, max)| l1(&r.pose.center, &c) <= max))
            .map(|(i, r)| (dot(descriptor, &r.descriptor), i))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.record(a.1).id.cmp(&self.record(b.1).id))
        });
        scored.into_iter().map(|(_, i)| i).collect()
    }

    /// Index-based variant of [`top_k_neighbours`].
    pub fn top_k(&self, query: usize, k: usize, max_l1_dist: Option<f64>) -> Result<Vec<usize>> {
        let q = self.record(query);
        let near = max_l1_dist.map(|d| (q.pose.center, d));
        let mut ranked = self.rank_train(&q.descriptor, Some(query), near);
        if ranked.is_empty() {
            return Err(Error::NoCandidates(q.id.clone()));
        }
        ranked.truncate(k);
        Ok(ranked)
    }
}

/// The `k` train records most similar to `query_id`, excluding the query and,
/// when `max_l1_dist` is set, records whose camera center is farther than that
/// (L1, meters). Fewer than `k` ids are returned when candidates run out.
pub fn top_k_neighbours(
    db: &SceneDatabase,
    query_id: &str,
    k: usize,
    max_l1_dist: Option<f64>,
) -> Result<Vec<String>> {
    let q = db.index_of(query_id)?;
    Ok(db
        .top_k(q, k, max_l1_dist)?
        .into_iter()
        .map(|i| db.record(i).id.clone())
        .collect())
}
