use styleprobe_core::detection::{
    average_gradient, layer_profile, objective_gradient, region_gradient, attribute_gradient, ColorReduction,
    GradientField, Objective, ObjectiveGraph,
};
use styleprobe_core::generator::{style_input_name, ChannelId, Generator, GeneratorConfig, LayerSpec};
use styleprobe_core::pipeline::sample_style;
use styleprobe_core::probes::{region_mask, ProbeSpec, RegionLayout, RegionMask};
use styleprobe_core::tensor::grad_check_piecewise;

fn toy() -> Generator {
    Generator::new(GeneratorConfig::default()).unwrap()
}

fn max_abs_diff(a: &GradientField, b: &GradientField) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn toy_objectives_match_finite_differences() {
    let g = toy();
    let layout = RegionLayout::default();
    let mouth = region_mask(&layout, "mouth", 32).unwrap();
    let probe = ProbeSpec::defaults()[0].resolve(&layout, 32).unwrap();
    let s = sample_style(&g, 0, 0).unwrap();
    for objective in [Objective::Region(&mouth, ColorReduction::Mean), Objective::Probe(&probe)] {
        let og = ObjectiveGraph::new(&g, objective).unwrap();
        let bindings = g.style_bindings(&s).unwrap();
        for l in 0..g.spec().len() {
            let err = grad_check_piecewise(&og.graph, &bindings, og.objective, &style_input_name(l), 1e-3).unwrap();
            assert!(err < 1e-5, "{} layer {l}: {err:e}", objective.tag());
        }
    }
}

#[test]
fn region_gradient_equals_explicit_jacobian_average() {
    let g = Generator::new(GeneratorConfig::with_spec(LayerSpec::tiny8())).unwrap();
    let layout = RegionLayout::default();
    let s = sample_style(&g, 3, 0).unwrap();
    for region in ["full", "mouth", "hairband"] {
        let mask = region_mask(&layout, region, 8).unwrap();
        let one_pass = region_gradient(&g, &s, &mask).unwrap();
        // one Jacobian row per pixel, averaged by hand
        let mut acc = vec![0.0; one_pass.flatten().len()];
        for p in (0..64).filter(|&p| mask.cells()[p]) {
            let pixel = RegionMask::single_pixel(8, p / 8, p % 8).unwrap();
            let row = region_gradient(&g, &s, &pixel).unwrap().flatten();
            acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
        }
        let n = mask.pixel_count() as f64;
        let diff = acc
            .iter()
            .zip(one_pass.flatten())
            .map(|(a, b)| (a / n - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{region}: {diff:e}");
    }
}

#[test]
fn region_mean_probe_matches_region_gradient() {
    let g = toy();
    let layout = RegionLayout::default();
    let mouth = region_mask(&layout, "mouth", 32).unwrap();
    let probe = ProbeSpec::region_mean("mouth").resolve(&layout, 32).unwrap();
    let s = sample_style(&g, 1, 0).unwrap();
    let a = region_gradient(&g, &s, &mouth).unwrap();
    let b = attribute_gradient(&g, &s, &probe).unwrap();
    let scale = a.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs_diff(&a, &b) <= 1e-12 * scale);
}

#[test]
fn silenced_channel_has_zero_gradient() {
    let id = ChannelId::new(5, 3);
    let g = toy().with_silenced_channel(id).unwrap();
    let full = region_mask(&RegionLayout::default(), "full", 32).unwrap();
    for i in 0..3 {
        let f = region_gradient(&g, &sample_style(&g, 2, i).unwrap(), &full).unwrap();
        assert_eq!(f.get(id).unwrap(), 0.0);
        assert!(f.get(ChannelId::new(5, 4)).unwrap() != 0.0);
    }
}

#[test]
fn averaging_properties() {
    let g = toy();
    let mouth = region_mask(&RegionLayout::default(), "mouth", 32).unwrap();
    let fields: Vec<GradientField> = (0..6)
        .map(|i| objective_gradient(&g, &sample_style(&g, 8, i).unwrap(), Objective::Region(&mouth, ColorReduction::Mean)).unwrap())
        .collect();
    let avg = average_gradient(&fields).unwrap();
    let profile = layer_profile(&avg);
    let profiles: Vec<_> = fields.iter().map(layer_profile).collect();
    for l in 0..profile.0.len() {
        let mean = profiles.iter().map(|p| p.0[l]).sum::<f64>() / profiles.len() as f64;
        assert!(profile.0[l] <= mean + 1e-15, "layer {l}");
    }
    // a field and its negation cancel
    let cancelled = average_gradient(&[fields[0].clone(), fields[0].scaled(-1.0)]).unwrap();
    assert!(cancelled.flatten().iter().all(|v| *v == 0.0));
    assert_eq!(average_gradient(&fields[..1]).unwrap().layers, fields[0].layers);
}
