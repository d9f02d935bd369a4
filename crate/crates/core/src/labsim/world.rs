use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{IpsConfig, LabConfig, LabError, OdometerConfig};
use crate::dynamics::{
    euler_step, physical_derivative, ControlInput, PhysicalParams, VehicleState,
};

/// Pose reported by the positioning system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpsObservation {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

/// One IPS sample of `truth`: `None` with probability `cfg.loss`, otherwise
/// the pose with a position error uniform in a disk of radius
/// `cfg.pos_bound` and a yaw error uniform in `[-yaw_bound, yaw_bound]`.
pub fn ips_observe<R: Rng + ?Sized>(
    truth: &VehicleState,
    cfg: &IpsConfig,
    rng: &mut R,
) -> Option<IpsObservation> {
    if rng.random::<f64>() < cfg.loss {
        return None;
    }
    let r = cfg.pos_bound * rng.random::<f64>().sqrt();
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    let yaw = if cfg.yaw_bound > 0.0 {
        rng.random_range(-cfg.yaw_bound..=cfg.yaw_bound)
    } else {
        0.0
    };
    Some(IpsObservation {
        x: truth.x + r * th.cos(),
        y: truth.y + r * th.sin(),
        psi: truth.psi + yaw,
    })
}

/// Tick-counting wheel odometer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Odometer {
    pub cfg: OdometerConfig,
    /// Signed distance travelled [m].
    pub distance: f64,
    last_count: i64,
}

impl Odometer {
    pub fn new(cfg: OdometerConfig) -> Self {
        Self {
            cfg,
            distance: 0.0,
            last_count: 0,
        }
    }

    /// Speed from the ticks counted since the previous read.
    pub fn read(&mut self, dt: f64) -> f64 {
        let tick = self.cfg.tick_length();
        let count = (self.distance / tick).floor() as i64;
        let ticks = count - self.last_count;
        self.last_count = count;
        ticks as f64 * tick / dt
    }
}

/// Ground truth of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthVehicle {
    pub state: VehicleState,
    pub physical: PhysicalParams,
    pub odometer: Odometer,
    /// Yaw rate at the end of the last tick [rad/s].
    pub yaw_rate: f64,
}

impl TruthVehicle {
    pub fn new(state: VehicleState, physical: PhysicalParams, odometer: OdometerConfig) -> Self {
        Self {
            state,
            physical,
            odometer: Odometer::new(odometer),
            yaw_rate: 0.0,
        }
    }

    /// Advance one tick with `lab.substeps` Euler substeps of the physical
    /// model under the acting command.
    pub fn advance(&mut self, acting: &ControlInput, lab: &LabConfig) -> Result<(), LabError> {
        let h = lab.dt / lab.substeps as f64;
        for _ in 0..lab.substeps {
            let before = self.state.v;
            self.state = euler_step(&self.state, acting, &self.physical, h)
                .map_err(|_| LabError::Diverged { step: 0 })?;
            self.odometer.distance += h * before;
        }
        self.yaw_rate = physical_derivative(&self.state, acting, &self.physical)
            .map(|f| f.dpsi)
            .unwrap_or(0.0);
        Ok(())
    }
}

/// Ground truth of the whole fleet.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct World {
    pub vehicles: Vec<TruthVehicle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArenaExit {
    pub vehicle: usize,
    pub step: u64,
}

/// Advance every vehicle one tick. `acting[i]` is the command leaving
/// vehicle `i`'s actuation queue. Vehicles that leave the arena are reported
/// and keep driving.
pub fn step_world(
    world: &World,
    acting: &[ControlInput],
    lab: &LabConfig,
    step: u64,
) -> Result<(World, Vec<ArenaExit>), LabError> {
    let mut next = world.clone();
    let mut exits = Vec::new();
    for (i, (v, u)) in next.vehicles.iter_mut().zip(acting).enumerate() {
        let was_in = lab.in_arena(v.state.x, v.state.y);
        v.advance(u, lab).map_err(|_| LabError::Diverged {
            step: step as usize,
        })?;
        if was_in && !lab.in_arena(v.state.x, v.state.y) {
            exits.push(ArenaExit {
                vehicle: i,
                step: step + 1,
            });
        }
    }
    Ok((next, exits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ideal_ips_is_exact() {
        let s = VehicleState::new(1.0, 2.0, 0.3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = ips_observe(&s, &IpsConfig::ideal(), &mut rng).unwrap();
        assert_eq!((o.x, o.y, o.psi), (1.0, 2.0, 0.3));
    }

    #[test]
    fn total_loss_never_emits() {
        let cfg = IpsConfig {
            loss: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(
            (0..10_000).all(|_| ips_observe(&VehicleState::default(), &cfg, &mut rng).is_none())
        );
    }

    #[test]
    fn odometer_conserves_distance() {
        let mut o = Odometer::new(OdometerConfig::default());
        let mut total = 0.0;
        for k in 0..500 {
            o.distance += 0.02 * (0.7 + 0.3 * (k as f64 * 0.1).sin());
            total += o.read(0.02) * 0.02;
        }
        assert!((total - o.distance).abs() <= OdometerConfig::default().tick_length() + 1e-12);
    }

    #[test]
    fn zero_commands_keep_world_static() {
        let lab = LabConfig::default();
        let v = TruthVehicle::new(
            VehicleState::new(1.0, 1.0, 0.5, 0.0),
            PhysicalParams::default(),
            lab.odometer,
        );
        let world = World {
            vehicles: vec![v; 3],
        };
        let acting = vec![ControlInput::new(0.0, 0.0, 7.4); 3];
        let (next, exits) = step_world(&world, &acting, &lab, 0).unwrap();
        assert!(exits.is_empty());
        assert_eq!(
            next.vehicles.iter().map(|v| v.state).collect::<Vec<_>>(),
            world.vehicles.iter().map(|v| v.state).collect::<Vec<_>>()
        );
    }
}
