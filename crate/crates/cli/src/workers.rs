//! Per-subject work spread over a capped number of threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

pub const THREADS_VAR: &str = "DXS_THREADS";

/// Worker cap from `DXS_THREADS`, else the available parallelism.
pub fn worker_count() -> Result<usize, String> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("{THREADS_VAR} must be a positive integer, got `{v}`")),
        },
        Err(_) => Ok(thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// `f` over `items` on up to `workers` threads. Output order follows the
/// input, so results never depend on the worker count.
pub fn map<I, O, E, F>(items: &[I], workers: usize, f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<O, E>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let items: Vec<u64> = (0..37).collect();
        let one: Result<Vec<u64>, ()> = map(&items, 1, |&x| Ok(x * x));
        let four: Result<Vec<u64>, ()> = map(&items, 4, |&x| Ok(x * x));
        assert_eq!(one, four);
    }

    #[test]
    fn first_error_in_input_order() {
        let items: Vec<i32> = (0..10).collect();
        let r: Result<Vec<i32>, i32> = map(&items, 3, |&x| if x % 4 == 3 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(3));
    }
}
