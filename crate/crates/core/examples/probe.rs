use chelonia::harness::scenarios::*;
use chelonia::hed::sim::NetProfile;
use chelonia::vtime::{fmt_secs, secs};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "depth" => {
            let lan = run_depth_test(41, 10, 1, NetProfile::LAN);
            for p in &lan.points {
                println!("d={} create={} stat={}", p.depth, p.create_messages, p.stat_messages);
            }
            let (a, b, r) = lan.stat_fit();
            println!("stat fit a={a} b={b} resid={r}");
            println!("c = {:?}", lan.create_minus_stat());
            let wan = run_depth_test(41, 10, 3, NetProfile::WAN);
            println!("wan create={:?}", wan.points.iter().map(|p| p.create_messages).collect::<Vec<_>>());
            println!("wan stat  ={:?}", wan.points.iter().map(|p| p.stat_messages).collect::<Vec<_>>());
        }
        "width" => {
            let w = run_width_test(42, 40);
            for p in w.points.iter().take(6) {
                println!("n={} addMsgs={} addBytes={} statBytes={} statPayload={}", p.n, p.add_messages, p.add_bytes, p.stat_bytes, p.stat_payload_bytes);
            }
            let (a, b, r) = w.stat_fit();
            println!("stat fit a={a} b={b} resid={r}  crossover={:?}", w.crossover());
        }
        "repl" => {
            let t0 = std::time::Instant::now();
            let r = run_replication_scenario(43);
            println!("wall: {:?}", t0.elapsed());
            for a in &r.output.assertions {
                println!("{} {} {}", if a.passed {"PASS"} else {"FAIL"}, a.name, a.detail);
            }
            println!("initial: {:?}", r.initial_distribution);
            println!("final:   {:?}", r.final_distribution);
        }
        "mc" => {
            let t0 = std::time::Instant::now();
            let r = run_multi_client(44, 30, &[10, 40, 70, 100]);
            println!("wall: {:?}", t0.elapsed());
            for p in &r.points {
                println!("clients={} min={} avg={} max={} retries={}", p.clients, fmt_secs(p.min_time), fmt_secs(p.avg_time), fmt_secs(p.max_time), p.retries);
            }
        }
        "bench" => {
            let t0 = std::time::Instant::now();
            for mode in BenchMode::ALL {
                let r = run_ahash_bench(45, mode);
                println!(
                    "{}: reads n={} msgs[{},{}] t[{},{}] writes n={} msgs[{},{}] t[{},{}] lost={:?}",
                    mode.name(), r.reads.count, r.reads.min_messages, r.reads.max_messages,
                    fmt_secs(r.reads.min_time), fmt_secs(r.reads.max_time),
                    r.writes.count, r.writes.min_messages, r.writes.max_messages,
                    fmt_secs(r.writes.min_time), fmt_secs(r.writes.max_time), r.lost_writes,
                );
            }
            println!("wall: {:?}", t0.elapsed());
        }
        "fuzz" => {
            let t0 = std::time::Instant::now();
            let s = run_election_fuzz(46, 100);
            println!("wall: {:?} violations={:?} acked={} reads={}", t0.elapsed(), s.violations, s.total_acked_writes, s.total_reads);
        }
        "soak" => {
            let t0 = std::time::Instant::now();
            let r = run_soak(47, secs(86400.0));
            println!("wall: {:?}", t0.elapsed());
            for a in &r.output.assertions {
                println!("{} {} {}", if a.passed {"PASS"} else {"FAIL"}, a.name, a.detail);
            }
            println!("gaps: {:?}", r.write_gaps.iter().map(|(s,e)| fmt_secs(e-s)).collect::<Vec<_>>());
        }
        _ => println!("probe: depth|width|repl|mc|bench|fuzz|soak"),
    }
}
