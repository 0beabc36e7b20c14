use std::ffi::{c_char, CString};
use std::ptr;

use cdnn_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { cdnn_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn haar_mesh_round_trip() {
    unsafe {
        let mut mesh = ptr::null_mut();
        assert_eq!(cdnn_mesh_haar(5, 9, &mut mesh), CdnnStatus::Ok);
        assert_eq!(cdnn_mesh_size(mesh), 5);
        let n = cdnn_mesh_num_phases(mesh);
        assert_eq!(n, 2 * 10 + 5);
        let mut phases = vec![0.0; n];
        assert_eq!(cdnn_mesh_phases(mesh, phases.as_mut_ptr(), n), CdnnStatus::Ok);

        let (mut re, mut im) = (vec![0.0; 25], vec![0.0; 25]);
        assert_eq!(cdnn_mesh_unitary(mesh, re.as_mut_ptr(), im.as_mut_ptr()), CdnnStatus::Ok);

        let mut again = ptr::null_mut();
        assert_eq!(cdnn_mesh_decompose(5, re.as_ptr(), im.as_ptr(), &mut again), CdnnStatus::Ok);
        let mut f = 0.0;
        assert_eq!(cdnn_mesh_fidelity(again, re.as_ptr(), im.as_ptr(), &mut f), CdnnStatus::Ok);
        assert!(f > 1.0 - 1e-12);

        let mut rebuilt = ptr::null_mut();
        assert_eq!(cdnn_mesh_from_phases(5, phases.as_ptr(), n, &mut rebuilt), CdnnStatus::Ok);
        assert_eq!(cdnn_mesh_fidelity(rebuilt, re.as_ptr(), im.as_ptr(), &mut f), CdnnStatus::Ok);
        assert!(f > 1.0 - 1e-12);

        cdnn_mesh_free(mesh);
        cdnn_mesh_free(again);
        cdnn_mesh_free(rebuilt);
        cdnn_mesh_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    unsafe {
        let mut mesh = ptr::null_mut();
        let re = [1.0, 1.0, 0.0, 1.0];
        let im = [0.0; 4];
        assert_eq!(cdnn_mesh_decompose(2, re.as_ptr(), im.as_ptr(), &mut mesh), CdnnStatus::Data);
        assert!(mesh.is_null());
        assert!(last_error().contains("not unitary"));

        assert_eq!(cdnn_mesh_decompose(2, ptr::null(), im.as_ptr(), &mut mesh), CdnnStatus::NullPointer);
        assert_eq!(cdnn_mesh_haar(0, 1, &mut mesh), CdnnStatus::InvalidArgument);
        let phases = [0.0; 3];
        assert_ne!(cdnn_mesh_from_phases(3, phases.as_ptr(), 3, &mut mesh), CdnnStatus::Ok);

        assert_eq!(cdnn_mesh_haar(3, 1, &mut mesh), CdnnStatus::Ok);
        let mut small = [0.0; 2];
        assert_eq!(cdnn_mesh_phases(mesh, small.as_mut_ptr(), 2), CdnnStatus::BufferTooSmall);
        assert!(last_error().contains("need 9"));
        cdnn_mesh_free(mesh);

        let bad = CString::new("{not json").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(cdnn_model_from_json(bad.as_ptr(), &mut model), CdnnStatus::Data);
    }
}

#[test]
fn last_error_truncates() {
    unsafe {
        let mut mesh = ptr::null_mut();
        assert_eq!(cdnn_mesh_haar(0, 1, &mut mesh), CdnnStatus::InvalidArgument);
        let mut buf = [1 as c_char; 4];
        let n = cdnn_last_error(buf.as_mut_ptr(), buf.len());
        assert!(n > 4);
        assert_eq!(buf[3], 0);
    }
}

#[test]
fn perf_matches_core() {
    assert_eq!(cdnn_op_count(6, 3), 240);
    let (mut e, mut t) = (0.0, 0.0);
    let s = unsafe {
        cdnn_perf_projected(64, 3, CdnnPhaseShifter::Mems, CdnnReadout::Receiverless, false, &mut e, &mut t)
    };
    assert_eq!(s, CdnnStatus::Ok);
    let spec = cdnn::perf::projected_system(
        64,
        3,
        cdnn::perf::PhaseShifterTech::Mems,
        cdnn::perf::ReadoutMode::Receiverless,
        false,
    );
    assert_eq!(e, cdnn::perf::energy_per_op_streaming(&spec).unwrap());
    assert_eq!(t, cdnn::perf::peak_throughput(&spec));
}

#[test]
fn model_inference_matches_core() {
    use cdnn::training::{self, FiconnConfig, ModelParams};
    let network = FiconnConfig::with_default_errors(6, 3, 1).unwrap();
    let params = ModelParams::initial(&network, 0.5, 1.5, 2).unwrap();
    let state = training::TrainState { schema_version: 1, params: params.clone(), history: vec![] };
    let json = serde_json::json!({ "schema_version": 1, "data_seed": 0, "network": network, "state": state });
    let text = CString::new(json.to_string()).unwrap();

    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(cdnn_model_from_json(text.as_ptr(), &mut model), CdnnStatus::Ok);
        assert_eq!(cdnn_model_size(model), 6);
        let x = [0.3, 0.9, 0.1, 0.5, 0.7, 0.2];
        let mut p = [0.0; 6];
        assert_eq!(cdnn_model_forward(model, x.as_ptr(), 6, p.as_mut_ptr()), CdnnStatus::Ok);
        let expected = training::forward(&x, &params, &network).unwrap();
        assert_eq!(p.to_vec(), expected);
        let mut class = usize::MAX;
        assert_eq!(cdnn_model_predict(model, x.as_ptr(), 6, &mut class), CdnnStatus::Ok);
        assert_eq!(class, training::argmax(&expected));

        let short = [0.5; 4];
        assert_ne!(cdnn_model_forward(model, short.as_ptr(), 4, p.as_mut_ptr()), CdnnStatus::Ok);
        cdnn_model_free(model);
    }
}
