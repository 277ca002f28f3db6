use std::collections::HashMap;

use super::Interaction;

/// Keep the maximal subset of records in which every user and every item
/// has at least `k` records. Removal is iterated until nothing changes.
/// Output preserves input order.
pub fn kcore_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut alive = vec![true; interactions.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (it, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *users.entry(&it.user_id).or_default() += 1;
            *items.entry(&it.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (it, a) in interactions.iter().zip(alive.iter_mut()) {
            if *a && (users[it.user_id.as_str()] < k || items[it.item_id.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions.iter().zip(&alive).filter(|(_, a)| **a).map(|(i, _)| i.clone()).collect()
}
