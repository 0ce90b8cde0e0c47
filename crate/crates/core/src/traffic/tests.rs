use super::*;

fn space() -> ContextSpace {
    ContextSpace::traffic()
}

fn ctx_with(pairs: &[(&str, f64)]) -> Context {
    let s = space();
    let mut c = s.midpoint();
    for (k, v) in pairs {
        c.set(&s, k, *v);
    }
    c
}

fn quiet(rows: usize, cols: usize) -> NetworkSpec {
    NetworkSpec {
        rows,
        cols,
        spawn_rate: 0.0,
        episode_len: 200,
        ..NetworkSpec::default()
    }
}

fn east_entry(env: &TrafficEnv) -> usize {
    env.network().incoming[0][Heading::East.index()]
}

#[test]
fn agents_and_shapes() {
    let env = TrafficEnv::new(quiet(1, 3), &space(), &space().midpoint(), 0).unwrap();
    assert_eq!(env.n_agents(), 3);
    let obs = env.observe_all();
    assert_eq!(obs.len(), 3);
    assert_eq!(env.obs_dim(), 4 * 24 + 8);
    for o in &obs {
        assert_eq!(o.len(), env.obs_dim());
        assert!(o[..96].iter().all(|&x| x == 0.0));
        assert_eq!(o[96], 1.0);
        assert_eq!(o[97..].iter().sum::<f64>(), 0.0);
    }
}

#[test]
fn reset_is_seed_deterministic_and_starts_empty() {
    let spec = NetworkSpec::default();
    let a = TrafficEnv::new(spec.clone(), &space(), &space().midpoint(), 7).unwrap();
    let b = TrafficEnv::new(spec.clone(), &space(), &space().upper_corner(), 7).unwrap();
    assert_eq!(a.schedule(), b.schedule());
    assert!(!a.schedule().is_empty());
    let c = TrafficEnv::new(spec, &space(), &space().midpoint(), 8).unwrap();
    assert_ne!(a.schedule(), c.schedule());
    let m = a.metrics();
    assert_eq!((m.throughput, m.avg_travel_time, m.episode_return), (0.0, 0.0, 0.0));
    assert_eq!(a.counts().spawned, 0);
}

#[test]
fn geometry_and_action_errors() {
    let spec = NetworkSpec {
        link_length: 12.0,
        ..NetworkSpec::default()
    };
    let long = ctx_with(&[("length", 8.0), ("minGap", 6.0)]);
    assert!(matches!(
        TrafficEnv::new(spec, &space(), &long, 0),
        Err(EnvError::Geometry { .. })
    ));
    let mut env = TrafficEnv::new(quiet(1, 2), &space(), &space().midpoint(), 0).unwrap();
    assert_eq!(env.step(&[0, 8]).unwrap_err(), EnvError::InvalidAction(8));
    assert!(matches!(env.step(&[0]), Err(EnvError::ActionCount { .. })));
}

#[test]
fn lone_vehicle_accelerates_to_max_speed() {
    for (acc, vmax) in [(3.0, 9.0), (1.0, 15.0), (2.5, 3.0), (4.0, 10.0)] {
        let c = ctx_with(&[("usualPosAcc", acc), ("maxSpeed", vmax)]);
        let mut env = TrafficEnv::new(quiet(1, 1), &space(), &c, 0).unwrap();
        env.set_signal_override(Some(SignalOverride::AllGreen));
        let link = east_entry(&env);
        env.inject_vehicle(link, 0.0, 0.0, vec![Movement::Through]);
        let reach = (vmax / acc).ceil() as usize;
        for t in 1..=reach + 3 {
            env.step(&[0]).unwrap();
            let (_, v) = env.vehicles().next().unwrap();
            let expected = (t as f64 * acc).min(vmax);
            assert!((v.speed - expected).abs() < 1e-12, "t={t}: {} vs {expected}", v.speed);
        }
    }
}

#[test]
fn never_stopped_vehicle_delay_matches_kinematics() {
    for vmax in [3.0, 7.5, 9.0, 15.0] {
        let c = ctx_with(&[("maxSpeed", vmax)]);
        let mut env = TrafficEnv::new(quiet(1, 1), &space(), &c, 0).unwrap();
        env.set_signal_override(Some(SignalOverride::AllGreen));
        let link = east_entry(&env);
        env.inject_vehicle(link, 0.0, vmax, vec![Movement::Through]);
        while env.completed().is_empty() {
            env.step(&[0]).unwrap();
        }
        let route_len = 2.0 * env.spec().link_length;
        let (mut pos, mut steps) = (0.0, 0u32);
        while pos < route_len {
            pos += vmax;
            steps += 1;
        }
        let m = env.metrics();
        assert_eq!(m.avg_travel_time, steps as f64);
        assert_eq!(m.avg_wait_time, 0.0);
        assert!((m.avg_delay - (steps as f64 - route_len / vmax)).abs() < 1e-9);
    }
}

#[test]
fn all_red_stops_everything() {
    let mut env = TrafficEnv::new(quiet(1, 2), &space(), &space().midpoint(), 0).unwrap();
    env.set_signal_override(Some(SignalOverride::AllRed));
    for h in Heading::ALL {
        let link = env.network().incoming[0][h.index()];
        env.inject_vehicle(link, 10.0, 9.0, vec![Movement::Through; 2]);
        env.inject_vehicle(link, 40.0, 9.0, vec![Movement::Through; 2]);
    }
    for _ in 0..60 {
        env.step(&[0, 0]).unwrap();
    }
    let tf = env.moving_time();
    for _ in 0..20 {
        let out = env.step(&[0, 0]).unwrap();
        assert_eq!(out.reward, 0.0);
    }
    assert_eq!(env.moving_time(), tf);
    assert!(env.vehicles().all(|(_, v)| v.speed == 0.0));
    assert!(env.vehicles().all(|(_, v)| v.position <= env.spec().link_length));
}

#[test]
fn stopped_vehicle_counts_in_queue() {
    let mut env = TrafficEnv::new(quiet(1, 1), &space(), &space().midpoint(), 0).unwrap();
    let link = east_entry(&env);
    env.inject_vehicle(link, 30.0, 0.0, vec![Movement::Through]);
    env.set_signal_override(Some(SignalOverride::AllRed));
    for _ in 0..40 {
        env.step(&[0]).unwrap();
    }
    let obs = env.observe(0);
    // East heading is the second incoming block; through lane is lane 1
    let base = (Heading::East.index() * 3 + 1) * FEATURES_PER_LANE;
    assert_eq!(obs[base], 1.0);
    assert_eq!(obs[base + 1], 1.0);
    assert_eq!(obs[base + 2], 0.0);
    assert!(obs[base + 3] < 0.01, "head at the stop line");
}

fn bumper_gaps_ok(env: &TrafficEnv) -> Result<(), String> {
    let len = env.vehicle_params().length;
    let mut prev: Option<(usize, f64)> = None;
    for (slot, v) in env.vehicles() {
        if let Some((s, front)) = prev {
            if s == slot && front - len - v.position < -1e-9 {
                return Err(format!("overlap on slot {slot}: {}", front - len - v.position));
            }
        }
        prev = Some((slot, v.position));
    }
    Ok(())
}

#[test]
fn two_vehicle_scenarios_keep_gaps() {
    let s = space();
    let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::Probe, 0);
    for case in 0..300 {
        let c = s.sample_uniform(&mut rng);
        let mut env = TrafficEnv::new(quiet(1, 1), &s, &c, 0).unwrap();
        env.set_signal_override(Some(SignalOverride::AllRed));
        let p = *env.vehicle_params();
        let link = east_entry(&env);
        let lead_pos = 30.0 + 60.0 * rng.random::<f64>();
        let lead_v = p.max_speed * rng.random::<f64>() * 0.5;
        let lead_v = lead_v.min(p.safe_speed(100.0 - lead_pos, 0.0));
        env.inject_vehicle(link, lead_pos, lead_v, vec![Movement::Through]);
        let gap = p.min_gap + (lead_pos - p.length - p.min_gap) * rng.random::<f64>();
        let fpos = lead_pos - p.length - gap;
        if fpos < 0.0 {
            continue;
        }
        env.inject_vehicle(link, fpos, 0.0, vec![Movement::Through]);
        let mut prev = (f64::NAN, f64::NAN);
        for _ in 0..120 {
            env.step(&[0]).unwrap();
            bumper_gaps_ok(&env).unwrap_or_else(|e| panic!("case {case}: {e}"));
            let vs: Vec<&Vehicle> = env.vehicles().map(|(_, v)| v).collect();
            let (lead, follow) = (vs[0], vs[1]);
            let g = lead.position - p.length - follow.position;
            let steady = follow.speed == prev.1 && lead.speed == prev.0;
            if steady {
                assert!(g >= p.min_gap - 1e-9, "case {case}: steady gap {g} < {}", p.min_gap);
            }
            prev = (lead.speed, follow.speed);
        }
    }
}

#[test]
fn conservation_and_speed_box_under_random_control() {
    let s = space();
    let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::Probe, 1);
    for seed in 0..4 {
        let c = s.sample_uniform(&mut rng);
        let spec = NetworkSpec {
            spawn_rate: 0.1,
            episode_len: 120,
            ..NetworkSpec::default()
        };
        let mut env = TrafficEnv::new(spec, &s, &c, seed).unwrap();
        let vmax = env.vehicle_params().max_speed;
        while !env.done() {
            let a: Vec<usize> = (0..2).map(|_| rng.random_range(0..8)).collect();
            env.step(&a).unwrap();
            let n = env.counts();
            assert_eq!(n.spawned, n.active + n.completed);
            assert!(env.vehicles().all(|(_, v)| (0.0..=vmax).contains(&v.speed)));
            bumper_gaps_ok(&env).unwrap();
        }
        let m = env.metrics();
        assert!(m.throughput > 0.0);
        assert!((m.episode_return - 0.033 * env.moving_time()).abs() < 1e-9);
    }
}

#[test]
fn faster_lone_vehicle_never_arrives_later() {
    let s = space();
    for (cycle, route) in [
        (10u64, vec![Movement::Through]),
        (17, vec![Movement::Through]),
        (25, vec![Movement::Left]),
    ] {
        let mut last = f64::INFINITY;
        for k in 0..=24 {
            let vmax = 3.0 + 0.5 * k as f64;
            let c = ctx_with(&[("maxSpeed", vmax)]);
            let mut env = TrafficEnv::new(quiet(1, 1), &s, &c, 0).unwrap();
            let link = east_entry(&env);
            env.inject_vehicle(link, 0.0, 0.0, route.clone());
            let mut t = 0;
            while env.completed().is_empty() {
                let phase = if (t / cycle) % 2 == 0 { 1 } else { 4 };
                env.step(&[phase]).unwrap();
                t += 1;
            }
            let tt = env.metrics().avg_travel_time;
            assert!(tt <= last, "cycle {cycle}, vmax {vmax}: {tt} > {last}");
            last = tt;
        }
    }
}

#[test]
fn trace_rows_per_agent_and_step() {
    use std::sync::{Arc, Mutex};
    #[derive(Clone, Default)]
    struct Sink(Arc<Mutex<Vec<u8>>>);
    impl Write for Sink {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let sink = Sink::default();
    let mut env = TrafficEnv::new(quiet(1, 2), &space(), &space().midpoint(), 0).unwrap();
    env.enable_trace(Box::new(sink.clone())).unwrap();
    for _ in 0..5 {
        env.step(&[1, 2]).unwrap();
    }
    env.finish_trace().unwrap();
    let text = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,agent,phase,queue_N,queue_E,queue_S,queue_W");
    assert_eq!(lines.len(), 1 + 5 * 2);
    assert_eq!(lines[2], "1,1,2,0,0,0,0");
}
