use std::collections::HashMap;

/// Graded relevance of judged items for one query.
pub type Grades = HashMap<String, f64>;

fn grade(judg: &Grades, id: &str) -> f64 {
    judg.get(id).copied().unwrap_or(0.0)
}

/// Number of items with grade > 0.
pub fn positives(judg: &Grades) -> usize {
    judg.values().filter(|&&g| g > 0.0).count()
}

/// `(1/min(R,k)) Σ_{i≤k, rel(i)} precision@i` with binary relevance
/// (grade > 0). `None` when the query has no positives.
pub fn average_precision_at_k<S: AsRef<str>>(ranking: &[S], judg: &Grades, k: usize) -> Option<f64> {
    let r = positives(judg);
    if r == 0 || k == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if grade(judg, id.as_ref()) > 0.0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / r.min(k) as f64)
}

/// Graded DCG@k over the ideal DCG@k of all judged grades. `None` when
/// the ideal DCG is zero.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], judg: &Grades, k: usize) -> Option<f64> {
    if k == 0 {
        return None;
    }
    let mut ideal: Vec<f64> = judg.values().copied().filter(|&g| g > 0.0).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum();
    if idcg <= 0.0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| grade(judg, id.as_ref()) / ((i + 2) as f64).log2())
        .sum();
    Some(dcg / idcg)
}

/// Reciprocal rank of the first item with grade > 0, or 0.
pub fn reciprocal_rank<S: AsRef<str>>(ranking: &[S], judg: &Grades) -> f64 {
    ranking
        .iter()
        .position(|id| grade(judg, id.as_ref()) > 0.0)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// 1 if any of the top `k` items has grade ≥ `min_grade`, else 0.
pub fn hit_at_k<S: AsRef<str>>(ranking: &[S], judg: &Grades, k: usize, min_grade: f64) -> f64 {
    let hit = ranking.iter().take(k).any(|id| grade(judg, id.as_ref()) >= min_grade);
    if hit {
        1.0
    } else {
        0.0
    }
}
