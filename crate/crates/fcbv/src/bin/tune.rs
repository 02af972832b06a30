//! Scratch harness for tuning primitive trajectories. Not part of the build.

use fcbv::geometry::vec3;
use fcbv::sim::{
    crumple, execute_primitive, generate_garment, settle, step, BimanualAction, GarmentInstance,
    GarmentRanges, GraspConstraint, GraspSpec, Primitive, SimParams, SimState,
};

fn shoulders(g: &GarmentInstance) -> (usize, usize) {
    let mut left = 0;
    let mut right = 0;
    let (mut bl, mut br) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, v) in g.vertices.iter().enumerate() {
        let sl = v[1] - v[0];
        let sr = v[1] + v[0];
        if sl > bl {
            bl = sl;
            left = i;
        }
        if sr > br {
            br = sr;
            right = i;
        }
    }
    (left, right)
}

fn stats(g: &GarmentInstance, s: &SimState, tag: &str) {
    let cov = g.projected_coverage(&s.positions).unwrap().fraction;
    let zmin = s.positions.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let zmax = s.positions.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    println!("    [{tag}] cov {cov:.3} z [{zmin:.3},{zmax:.3}] speed {:.3}", s.max_speed());
}

fn animate_pub(
    s: &mut SimState,
    g: &GarmentInstance,
    params: &SimParams,
    moves: &[(usize, [f64; 3])],
    duration: f64,
) {
    let steps = ((duration / params.dt).ceil() as usize).max(1);
    let starts: Vec<[f64; 3]> = moves.iter().map(|&(ci, _)| s.constraints[ci].handle).collect();
    for k in 1..=steps {
        let t01 = k as f64 / steps as f64;
        for ((ci, target), start) in moves.iter().zip(starts.iter()) {
            let h = vec3::add(*start, vec3::scale(vec3::sub(*target, *start), t01));
            let c = &mut s.constraints[*ci];
            c.handle_velocity = vec3::scale(vec3::sub(h, c.handle), 1.0 / params.dt);
            c.handle = h;
        }
        step(s, g, params).unwrap();
    }
}

fn trace_fling(g: &GarmentInstance, start: &SimState, params: &SimParams) {
    let mut s = start.clone();
    stats(g, &s, "start");
    let (v1, v2) = shoulders(g);
    let p1 = s.positions[v1];
    let p2 = s.positions[v2];
    let c = {
        let mut c = [0.0; 3];
        for p in &s.positions {
            c = vec3::add(c, *p);
        }
        vec3::scale(c, 1.0 / s.positions.len() as f64)
    };
    let m = vec3::scale(vec3::add(p1, p2), 0.5);
    let mut dir = [m[0] - c[0], m[1] - c[1], 0.0];
    let n = vec3::norm(dir);
    dir = if n < 1e-6 { [1.0, 0.0, 0.0] } else { vec3::scale(dir, 1.0 / n) };

    s.constraints.push(GraspConstraint {
        attached: vec![(v1, [0.0; 3])],
        handle: p1,
        handle_velocity: [0.0; 3],
    });
    s.constraints.push(GraspConstraint {
        attached: vec![(v2, [0.0; 3])],
        handle: p2,
        handle_velocity: [0.0; 3],
    });
    let hang = 1.15 * g.params.body_height + 0.05;
    let height = params.fling_height.max(hang);
    let taut = 0.96 * vec3::dist(g.vertices[v1], g.vertices[v2]);
    let up1 = [p1[0], p1[1], height];
    let up2 = [p2[0], p2[1], height];
    animate_pub(&mut s, g, params, &[(0, up1), (1, up2)], params.fling_lift_time);
    stats(g, &s, "lift ");
    let mid = vec3::scale(vec3::add(up1, up2), 0.5);
    let mut axis = [-dir[1], dir[0], 0.0];
    if vec3::dot(vec3::sub(up2, up1), axis) < 0.0 {
        axis = vec3::scale(axis, -1.0);
    }
    let half = 0.5 * taut.max(vec3::norm(vec3::sub(up2, up1)));
    let st1 = vec3::sub(mid, vec3::scale(axis, half));
    let st2 = vec3::add(mid, vec3::scale(axis, half));
    animate_pub(&mut s, g, params, &[(0, st1), (1, st2)], 0.35);
    animate_pub(&mut s, g, params, &[(0, st1), (1, st2)], 0.30);
    stats(g, &s, "strch");
    // Hanging extent check: how far below the grippers does the cloth reach,
    // and how wide is it across the axis?
    let hang_low = s.positions.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let spread: f64 = s
        .positions
        .iter()
        .map(|p| vec3::dot(vec3::sub(*p, mid), axis))
        .fold(f64::NEG_INFINITY, f64::max)
        - s.positions
            .iter()
            .map(|p| vec3::dot(vec3::sub(*p, mid), axis))
            .fold(f64::INFINITY, f64::min);
    println!("    hang: low z {hang_low:.3}, width across axis {spread:.3}, taut target {taut:.3}");

    let swing_dist = params.fling_distance.max(hang + 0.05);
    let end_mid = vec3::scale(dir, 0.5 * hang);
    let start_mid = vec3::sub(end_mid, vec3::scale(dir, swing_dist));
    let off1 = vec3::sub(st1, mid);
    let off2 = vec3::sub(st2, mid);
    let carry1 = [start_mid[0] + off1[0], start_mid[1] + off1[1], height];
    let carry2 = [start_mid[0] + off2[0], start_mid[1] + off2[1], height];
    let carry_dist = vec3::dist([mid[0], mid[1], 0.0], [start_mid[0], start_mid[1], 0.0]);
    animate_pub(&mut s, g, params, &[(0, carry1), (1, carry2)], (carry_dist / 0.8).max(0.2));
    stats(g, &s, "carry");
    let f = params.fling_release_fraction;
    let rel_mid = vec3::add(start_mid, vec3::scale(dir, swing_dist * f));
    let rel_z = height + (0.02 - height) * f;
    let r1 = [rel_mid[0] + off1[0], rel_mid[1] + off1[1], rel_z];
    let r2 = [rel_mid[0] + off2[0], rel_mid[1] + off2[1], rel_z];
    animate_pub(&mut s, g, params, &[(0, r1), (1, r2)], params.fling_swing_time * f);
    stats(g, &s, "swing");
    s.constraints.clear();
    settle(&mut s, g, params).unwrap();
    stats(g, &s, "setl ");
}

fn main() {
    let ranges = GarmentRanges { coverage_resolution: 128, ..GarmentRanges::default() };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let params = SimParams::default();
    if args.first().map(|s| s.as_str()) == Some("trace") {
        let gseed: u64 = args[1].parse().unwrap();
        let cseed: u64 = args[2].parse().unwrap();
        let g = generate_garment(gseed, &ranges).unwrap();
        println!(
            "garment {gseed}: body {:.2}x{:.2}, sleeves {:.2}x{:.2}, pitch {:.3}, {} verts",
            g.params.body_width,
            g.params.body_height,
            g.params.sleeve_length,
            g.params.sleeve_width,
            g.params.pitch,
            g.vertex_count()
        );
        let s = crumple(&g, 4, cseed + 11, &params).unwrap();
        trace_fling(&g, &s, &params);
        return;
    }

    if args.first().map(|s| s.as_str()) == Some("pretrain") {
        use fcbv::features::*;
        let t0 = std::time::Instant::now();
        let pc = PretrainConfig {
            n_instances: args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6),
            deformations_per_instance: args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6),
            n_points: args.get(3).map(|s| s.parse().unwrap()).unwrap_or(256),
            anchors_per_step: 32,
            epochs: args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4),
            steps_per_epoch: args.get(5).map(|s| s.parse().unwrap()).unwrap_or(24),
            crumple_moves: 3,
            learning_rate: 1e-3,
            seed: 0,
        };
        let fc = FeatureExtractorConfig {
            m_neg: args.get(6).map(|s| s.parse().unwrap()).unwrap_or(48),
            ..FeatureExtractorConfig::desk(args.get(7).map(|s| s.parse().unwrap()).unwrap_or(24))
        };
        let corpus = PretrainCorpus::generate(&pc, &ranges, &params, 100).unwrap();
        println!("corpus built in {:.1}s", t0.elapsed().as_secs_f64());
        let t1 = std::time::Instant::now();
        let (ex, log) = pretrain_features(&fc, &pc, &corpus, None).unwrap();
        println!("trained in {:.1}s, epoch losses {:?}", t1.elapsed().as_secs_f64(), log.epoch_losses);
        // Held-out: new deformations of training instances.
        let mut accs = Vec::new();
        for i in 0..pc.n_instances.min(4) {
            let inst = &corpus.instances[i];
            let s1 = crumple(inst, 3, 9000 + i as u64, &params).unwrap();
            let s2 = crumple(inst, 3, 9100 + i as u64, &params).unwrap();
            let c1 = fcbv::sim::render_pointcloud(&s1, inst, pc.n_points, 77).unwrap();
            let c2 = fcbv::sim::render_pointcloud(&s2, inst, pc.n_points, 78).unwrap();
            let a = DeformationSample::build(inst, i, c1);
            let b = DeformationSample::build(inst, i, c2);
            let acc = matching_accuracy(&ex, inst, &a, &b, 100, 0.05, 5).unwrap();
            accs.push(acc);
            println!("  instance {i}: held-out matching accuracy {acc:.3}");
        }
        println!(
            "mean acc {:.3}, total {:.1}s",
            accs.iter().sum::<f64>() / accs.len() as f64,
            t0.elapsed().as_secs_f64()
        );
        return;
    }

    if args.first().map(|s| s.as_str()) == Some("overfit") {
        use fcbv::features::*;
        use fcbv::nn::Adam;
        use fcbv::tensor::Tape;
        use rand::SeedableRng;
        let g = generate_garment(100, &ranges).unwrap();
        let s1 = crumple(&g, 3, 1, &params).unwrap();
        let s2 = crumple(&g, 3, 2, &params).unwrap();
        let c1 = fcbv::sim::render_pointcloud(&s1, &g, 256, 7).unwrap();
        let c2 = fcbv::sim::render_pointcloud(&s2, &g, 256, 8).unwrap();
        let a = DeformationSample::build(&g, 0, c1);
        let b = DeformationSample::build(&g, 0, c2);
        let fc = FeatureExtractorConfig { m_neg: 48, ..FeatureExtractorConfig::desk(24) };
        let mut ex = FeatureExtractorState::new(fc.clone(), 0);
        let mut adam = Adam::new(&ex.store, 1e-3, 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // Fixed pairings, reused every step.
        let a_sources = a.cloud.source_vertex_ids.clone().unwrap();
        let mut pairings = Vec::new();
        use rand::Rng;
        while pairings.len() < 32 {
            let anchor = rng.gen_range(0..a.cloud.len());
            let vb = a_sources[anchor];
            let positive = b.point_for_vertex[vb];
            let b_sources = b.cloud.source_vertex_ids.as_ref().unwrap();
            let mut negatives = Vec::new();
            while negatives.len() < 48 {
                let cand = rng.gen_range(0..b.cloud.len());
                if vec3::dist(g.vertices[b_sources[cand]], g.vertices[vb]) > 0.05 {
                    negatives.push(cand);
                }
            }
            pairings.push(AnchorPairing { anchor, positive, negatives });
        }
        for step_i in 0..400 {
            let mut tape = Tape::new();
            let binding = ex.store.bind(&mut tape);
            let fa = ex.forward_on_tape(&mut tape, &binding, &a.cloud);
            let fb = ex.forward_on_tape(&mut tape, &binding, &b.cloud);
            let loss = contrastive_batch_loss(&mut tape, fa, fb, &pairings, fc.tau);
            let lv = tape.scalar(loss);
            if step_i % 40 == 0 {
                println!("  step {step_i}: loss {lv:.4}");
            }
            tape.backward(loss);
            let grads = binding.grads(&tape);
            adam.step(&mut ex.store, &grads);
        }
        return;
    }

    if args.first().map(|s| s.as_str()) == Some("random") {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let mut covs = Vec::new();
        for seed in 0..6u64 {
            let g = generate_garment(seed, &ranges).unwrap();
            for cseed in 0..3u64 {
                let s = match crumple(&g, 4, cseed + 11, &params) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                let before = g.projected_coverage(&s.positions).unwrap().fraction;
                // Random pair of surface vertices, retried until separated.
                let mut pair = None;
                for _ in 0..50 {
                    let a = rng.gen_range(0..g.vertex_count());
                    let b = rng.gen_range(0..g.vertex_count());
                    if vec3::dist(s.positions[a], s.positions[b]) >= params.min_grasp_separation {
                        pair = Some((a, b));
                        break;
                    }
                }
                let Some((a, b)) = pair else { continue };
                let action = BimanualAction {
                    primitive: Primitive::Fling,
                    grasp_1: Some(GraspSpec { point: s.positions[a], theta_bin: 0 }),
                    grasp_2: Some(GraspSpec { point: s.positions[b], theta_bin: 0 }),
                };
                if let Ok((after, _)) = execute_primitive(&s, &g, &action, &params) {
                    let cov = g.projected_coverage(&after.positions).unwrap().fraction;
                    println!("  g{seed} c{cseed}: {before:.3} -> {cov:.3}");
                    covs.push(cov);
                }
            }
        }
        let mean = covs.iter().sum::<f64>() / covs.len() as f64;
        println!("random fling mean final coverage: {mean:.3} over {}", covs.len());
        return;
    }

    let mut total_gain = 0.0;
    let mut count = 0;
    for seed in 0..6u64 {
        let g = generate_garment(seed, &ranges).unwrap();
        for cseed in 0..3u64 {
            let s = match crumple(&g, 4, cseed + 11, &params) {
                Ok(s) => s,
                Err(e) => {
                    println!("  crumple failed g{seed} c{cseed}: {e}");
                    continue;
                }
            };
            let before = g.projected_coverage(&s.positions).unwrap().fraction;
            let (l, r) = shoulders(&g);
            let action = BimanualAction {
                primitive: Primitive::Fling,
                grasp_1: Some(GraspSpec { point: s.positions[l], theta_bin: 0 }),
                grasp_2: Some(GraspSpec { point: s.positions[r], theta_bin: 0 }),
            };
            match execute_primitive(&s, &g, &action, &params) {
                Ok((after, _)) => {
                    let cov = g.projected_coverage(&after.positions).unwrap().fraction;
                    println!("  g{seed} c{cseed}: {before:.3} -> {cov:.3}");
                    total_gain += cov - before;
                    count += 1;
                }
                Err(e) => println!("  g{seed} c{cseed}: exec failed: {e}"),
            }
        }
    }
    println!("mean gain {:.3} over {count}", total_gain / count.max(1) as f64);
}
