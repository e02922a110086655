use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

/// Run `work` over `jobs` on up to `workers` threads. Results reach `emit`
/// on the calling thread, in job order, as soon as each prefix is complete.
pub fn run_ordered<J, R, W, E>(jobs: &[J], workers: usize, work: W, mut emit: E)
where
    J: Sync,
    R: Send,
    W: Fn(&J) -> R + Sync,
    E: FnMut(usize, R),
{
    if jobs.is_empty() {
        return;
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() || tx.send((i, work(&jobs[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&cursor) {
                emit(cursor, result);
                cursor += 1;
            }
        }
    });
}
