//! Average speed on the on-ramp merge as CAV penetration grows, five seeds
//! per rate, run in parallel.

use comal::agent::ScriptedBackend;
use comal::harness::sweep;
use comal::scenario::find;

fn main() {
    let pens = [0.0, 0.10, 0.25, 1.0 / 3.0, 0.50, 0.90];
    let seeds: Vec<u64> = (0..5).collect();
    let table = sweep(&[find("Merge 0").unwrap()], &seeds, &pens, &ScriptedBackend).unwrap();
    print!("{}", table.to_text());
}
