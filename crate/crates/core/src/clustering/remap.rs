//! Head transfer across map refits by maximal membership overlap.

/// For every new node, the old node whose head it inherits (`None` means a
/// fresh head).
///
/// Greedy: repeatedly take the (new, old) pair sharing the most users, ties
/// by lowest new then lowest old index, and retire both. Pairs with no
/// shared users are never matched by overlap; a leftover new node keeps the
/// head of the same index when that head was not handed out.
pub fn remap_heads(old: &[usize], new: &[usize], nodes: usize) -> Vec<Option<usize>> {
    let mut overlap = vec![vec![0usize; nodes]; nodes];
    for (&o, &n) in old.iter().zip(new) {
        if o < nodes && n < nodes {
            overlap[n][o] += 1;
        }
    }
    let mut source = vec![None; nodes];
    let mut old_used = vec![false; nodes];
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for (n, row) in overlap.iter().enumerate() {
            if source[n].is_some() {
                continue;
            }
            for (o, &c) in row.iter().enumerate() {
                if old_used[o] || c == 0 {
                    continue;
                }
                if best.is_none_or(|(_, _, bc)| c > bc) {
                    best = Some((n, o, c));
                }
            }
        }
        match best {
            Some((n, o, _)) => {
                source[n] = Some(o);
                old_used[o] = true;
            }
            None => break,
        }
    }
    for n in 0..nodes {
        if source[n].is_none() && !old_used[n] {
            source[n] = Some(n);
            old_used[n] = true;
        }
    }
    source
}

/// Reorders `items` so that slot `n` holds `items[source[n]]`; slots with
/// no source are filled by `fresh(n)`.
pub fn apply_remap<T: Clone>(
    items: &[T],
    source: &[Option<usize>],
    mut fresh: impl FnMut(usize) -> T,
) -> Vec<T> {
    source
        .iter()
        .enumerate()
        .map(|(n, s)| match s {
            Some(o) => items[*o].clone(),
            None => fresh(n),
        })
        .collect()
}
