//! Bounded, order-preserving parallel map used for per-stage fan-out.

use std::sync::mpsc;
use std::sync::Mutex;

/// Runs `f` over `items` on at most `bound` worker threads and returns the
/// results in input order. Results must not depend on scheduling: `f` is
/// expected to be a pure function of its item (plus shared read-only state).
pub fn fan_out<T, R, F>(items: Vec<T>, bound: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = bound.max(1).min(n);
    if workers == 1 {
        return items.into_iter().map(f).collect();
    }

    let queue = Mutex::new(items.into_iter().enumerate());
    let (tx, rx) = mpsc::channel::<(usize, R)>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let f = &f;
            scope.spawn(move || loop {
                let next = queue.lock().expect("fan-out queue poisoned").next();
                match next {
                    Some((idx, item)) => {
                        if tx.send((idx, f(item))).is_err() {
                            return;
                        }
                    }
                    None => return,
                }
            });
        }
        drop(tx);

        let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
        for (idx, result) in rx {
            slots[idx] = Some(result);
        }
        slots
            .into_iter()
            .map(|slot| slot.expect("fan-out worker dropped a result"))
            .collect()
    })
}
