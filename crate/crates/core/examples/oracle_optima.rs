//! Prints the noise-free oracle optimum of every shipped scenario as an
//! `[optimum]` table, plus the IPC argmax for comparison.

use knobloop::registry::{KnobValue, Registry};
use knobloop::sim::{load_surface, SCENARIOS};

fn main() {
    let reg = Registry::builtin();
    for (name, _) in SCENARIOS {
        let s = load_surface(name, &reg).expect("shipped scenario binds");
        let (cfg, v) = s.oracle_optimum(9, 1_000_000);
        let (_, ipc) = s.ipc_optimum(9, 1_000_000);
        println!("# {name}: default {:.4}, optimum {v:.4}, ipc argmax {ipc:.4}", s.default_value());
        println!("[optimum]");
        for (k, val) in &cfg.assignments {
            match val {
                KnobValue::Token(t) => println!("{k} = \"{t}\""),
                other => println!("{k} = {other}"),
            }
        }
        println!();
    }
}
