//! Thread placement. Performance-first mapping puts each new worker on the
//! CPU hosting the fewest workers, preferring distinct physical cores before
//! hyperthread siblings.

use std::fs;
use std::sync::Mutex;

/// CPUs this process may run on, ordered so that the first CPU of every
/// physical core comes before any sibling.
pub fn cpu_order() -> Vec<usize> {
    let allowed = allowed_cpus();
    let mut keyed: Vec<(usize, usize, usize)> = allowed
        .iter()
        .map(|&cpu| {
            let rank = sibling_rank(cpu).unwrap_or(0);
            (rank, cpu, cpu)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, cpu)| cpu).collect()
}

#[cfg(target_os = "linux")]
fn allowed_cpus() -> Vec<usize> {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) == 0 {
            let cpus: Vec<usize> = (0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &set))
                .collect();
            if !cpus.is_empty() {
                return cpus;
            }
        }
    }
    (0..available()).collect()
}

#[cfg(not(target_os = "linux"))]
fn allowed_cpus() -> Vec<usize> {
    (0..available()).collect()
}

fn available() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Position of `cpu` among its core's hyperthreads (0 for the first).
fn sibling_rank(cpu: usize) -> Option<usize> {
    let path = format!("/sys/devices/system/cpu/cpu{cpu}/topology/thread_siblings_list");
    let list = fs::read_to_string(path).ok()?;
    let siblings = parse_cpu_list(list.trim())?;
    siblings.iter().position(|&c| c == cpu)
}

/// Parses "0-3,8,10-11".
pub fn parse_cpu_list(s: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => out.extend(a.parse::<usize>().ok()?..=b.parse::<usize>().ok()?),
            None => out.push(part.parse().ok()?),
        }
    }
    Some(out)
}

/// Hands out CPUs for workers, balancing the number of workers per CPU.
pub struct Pinner {
    cpus: Vec<usize>,
    load: Mutex<Vec<usize>>,
}

impl Pinner {
    pub fn new() -> Pinner {
        Pinner::with_cpus(cpu_order())
    }

    pub fn with_cpus(cpus: Vec<usize>) -> Pinner {
        let load = Mutex::new(vec![0; cpus.len()]);
        Pinner { cpus, load }
    }

    /// The CPU the next worker should use.
    pub fn assign(&self) -> Option<usize> {
        let mut load = self.load.lock().unwrap();
        let (i, _) = load.iter().enumerate().min_by_key(|(i, n)| (**n, *i))?;
        load[i] += 1;
        Some(self.cpus[i])
    }

    /// Binds the calling thread to the next CPU. Returns the CPU, or `None`
    /// if the platform refused.
    pub fn pin_worker(&self) -> Option<usize> {
        let cpu = self.assign()?;
        bind_current(cpu).then_some(cpu)
    }
}

impl Default for Pinner {
    fn default() -> Self {
        Pinner::new()
    }
}

#[cfg(target_os = "linux")]
pub fn bind_current(cpu: usize) -> bool {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
pub fn bind_current(_cpu: usize) -> bool {
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_worker_per_cpu_then_wraps() {
        let p = Pinner::with_cpus(vec![0, 1, 2, 3]);
        let got: Vec<_> = (0..8).filter_map(|_| p.assign()).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn no_cpus_means_no_pinning() {
        assert_eq!(Pinner::with_cpus(vec![]).assign(), None);
    }

    #[test]
    fn cpu_list_parsing() {
        assert_eq!(parse_cpu_list("0-2,5"), Some(vec![0, 1, 2, 5]));
        assert_eq!(parse_cpu_list("7"), Some(vec![7]));
        assert_eq!(parse_cpu_list("x"), None);
    }

    #[test]
    fn order_covers_allowed_cpus() {
        let order = cpu_order();
        assert!(!order.is_empty());
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), order.len());
    }
}
