//! Tip pose of the gripper for a few hand-picked section bends.
//!
//! cargo run --example forward_kinematics

use gripper_twin::kinematics::{
    chain_transform, end_effector, thetas_to_config, FlangePose, GripperConfig, GripperMount,
    DEFAULT_ARC_LENGTHS,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mount = GripperMount::default();

    let straight = chain_transform(&GripperConfig::straight(), &mount)?;
    println!("straight tip: {:?} mm", straight.position());

    // Per-section bends in degrees, all in the same plane.
    for bends_deg in [[10.0, 10.0, 10.0, 10.0], [5.0, 15.0, 25.0, 35.0], [-20.0, 0.0, 0.0, 20.0]] {
        let bends = bends_deg.map(|d: f64| d.to_radians());
        let config = thetas_to_config(&bends, &[0.0; 4], &DEFAULT_ARC_LENGTHS)?;
        let tip = chain_transform(&config, &mount)?;
        let p = tip.position();
        println!(
            "bends {bends_deg:?}°: tip ({:.3}, {:.3}, {:.3}) mm, kappas {:.5?} 1/mm",
            p[0], p[1], p[2],
            config.kappas()
        );
    }

    // Same chain carried by a robot flange 300 mm above the base, turned 90° about z.
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let flange = FlangePose::new([0.0, 0.0, 300.0], [h, 0.0, 0.0, h])?;
    let bends = [10.0f64; 4].map(f64::to_radians);
    let config = thetas_to_config(&bends, &[0.0; 4], &DEFAULT_ARC_LENGTHS)?;
    let pose = end_effector(&flange, &config, &mount)?;
    println!("in the base frame: {:?}", pose.position());
    println!("quaternion wxyz: {:?}", pose.quaternion());
    Ok(())
}
