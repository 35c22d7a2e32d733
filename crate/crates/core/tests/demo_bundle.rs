use residcert::config::Flavor;
use residcert::pipeline::{run_demo, DemoOptions};
use residcert::verify::{verify_block_file, verify_edit_file, verify_model_file, Tolerances};

#[test]
fn demo_bundle_verifies() {
    for flavor in [Flavor::Gpt2, Flavor::Llama] {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let out = run_demo(root, &DemoOptions::toy(flavor, 7)).unwrap();
        let tol = Tolerances::default();
        for c in &out.block_certificates {
            let r = verify_block_file(c, root, &tol);
            assert!(r.passed, "{r}");
        }
        let r = verify_model_file(&out.model_certificate, root, &tol);
        assert!(r.passed, "{r}");
        for c in &out.edit_certificates {
            let r = verify_edit_file(c, root, &tol);
            assert!(r.passed, "{r}");
        }
        assert!(out.all_certified, "{flavor:?}");
    }
}
