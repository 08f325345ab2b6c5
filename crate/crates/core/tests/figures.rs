use pimsim::experiments::{reproduce, Options, FIGURES};

fn header(id: &str) -> &'static str {
    match id {
        "fig5" => "model,seq,nonlinear_cycles,total_cycles,nonlinear_share,error",
        "fig8" => "model,batch,seq,base_cycles,opt_cycles,speedup,error",
        "fig13" => "model,devices,arch_variant,latency_ms_per_token,tokens_per_second,energy_per_token_uj,dram_pj,sram_pj,bond_pj,noc_pj,link_pj,nlu_pj,error",
        "fig14" => "model,batch,seq,arch_variant,tokens_per_second,speedup_vs_dram_only,error",
        "fig15" => "model,tp,bank_utilization,dram_only_cycles,hybrid_cycles,ratio,error",
        "fig16" => "model,layout,bonds_per_bank,bond_gbps,voltage,fc_cycles,bottleneck,error",
        "fig18" => "model,batch,seq,centralized_cycles,curry_cycles,reduction,error",
        "fig19" => "kernel,elements,unfused_cycles,fused_cycles,reduction",
        "fig20" => "model,seq,tp,score_ratio,context_ratio,attention_energy_ratio,error",
        _ => unreachable!(),
    }
}

#[test]
fn every_figure_has_a_stable_header_and_no_failed_rows() {
    for id in FIGURES {
        let t = reproduce(id, Options::default()).unwrap();
        let csv = t.to_csv();
        assert_eq!(csv.lines().next().unwrap(), header(id), "{id}");
        assert!(!t.rows.is_empty(), "{id}");
        if let Some(e) = t.columns.iter().position(|c| c == "error") {
            for r in &t.rows {
                assert!(r[e].is_empty(), "{id}: {}", r[e]);
            }
        }
    }
}

#[test]
fn figure_trends() {
    let o = Options::default();
    let share = reproduce("fig5", o).unwrap().column("nonlinear_share");
    assert!(share.windows(2).all(|w| w[1] > w[0]), "{share:?}");

    let sp = reproduce("fig8", o).unwrap().column("speedup");
    assert!(sp.iter().all(|s| (1.0..=2.0).contains(s)), "{sp:?}");
    let mut sorted = sp.clone();
    sorted.sort_by(f64::total_cmp);
    assert!(sorted[sorted.len() / 2] >= 1.15, "{sp:?}");

    let red = reproduce("fig18", o).unwrap().column("reduction");
    assert!(red.iter().all(|r| *r >= 0.25), "{red:?}");

    let util = reproduce("fig15", o).unwrap().column("bank_utilization");
    assert!(util.windows(2).all(|w| w[1] <= w[0]), "{util:?}");
}

#[test]
fn fig16_voltage_does_not_change_latency() {
    let t = reproduce("fig16", Options::default()).unwrap();
    let fc = t.column("fc_cycles");
    assert!(fc.chunks(2).all(|p| p[0] == p[1]), "{fc:?}");
}
