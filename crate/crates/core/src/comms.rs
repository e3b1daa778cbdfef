//! Directional-antenna and link-budget model.
//!
//! Misalignment geometry, a cos^n pattern-gain model anchored at the
//! half-power beamwidth, free-space path loss, SNR, the decode-and-forward
//! end-to-end rate, the alignment-margin constraint, and the output map used
//! by the tracking cost.

use nalgebra::{SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::vehicle::MravState;
use crate::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Tracked output: relay position (3) plus the misalignment angles to the
/// base station and to the peer vehicle.
pub type OutputVec = SVector<f64, 5>;
pub const OUTPUT_DIM: usize = 5;

pub fn db_to_linear(db: f64) -> f64 {
    10.0_f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// A body-fixed directional antenna.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AntennaSpec {
    /// Boresight direction in the body frame. Normalized at construction.
    pub boresight_body: Vector3<f64>,
    pub peak_gain_db: f64,
    /// Full angle at which the pattern is 3 dB down, rad. In (0, pi/2).
    pub half_power_beamwidth: f64,
    /// Back-lobe floor, dB.
    pub floor_gain_db: f64,
}

impl Default for AntennaSpec {
    fn default() -> Self {
        Self {
            boresight_body: Vector3::x(),
            peak_gain_db: 12.0,
            half_power_beamwidth: 0.7,
            floor_gain_db: -20.0,
        }
    }
}

impl AntennaSpec {
    pub fn new(
        boresight: Vector3<f64>,
        peak_gain_db: f64,
        half_power_beamwidth: f64,
        floor_gain_db: f64,
    ) -> Result<Self> {
        let spec = Self {
            boresight_body: boresight,
            peak_gain_db,
            half_power_beamwidth,
            floor_gain_db,
        };
        spec.normalized()
    }

    /// Returns a copy with a unit boresight, validating the remaining fields.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.boresight_body.norm();
        if norm < 1e-9 {
            return Err(Error::Validation("antenna boresight must be nonzero".into()));
        }
        if !(self.half_power_beamwidth > 0.0
            && self.half_power_beamwidth < std::f64::consts::FRAC_PI_2)
        {
            return Err(Error::Validation(
                "half_power_beamwidth must lie in (0, pi/2)".into(),
            ));
        }
        if self.floor_gain_db >= self.peak_gain_db {
            return Err(Error::Validation(
                "floor_gain_db must be below peak_gain_db".into(),
            ));
        }
        let mut out = self.clone();
        out.boresight_body /= norm;
        Ok(out)
    }
}

/// Communication parameters shared by both links of the relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommParams {
    pub tx_power_dbm: f64,
    pub carrier_frequency_hz: f64,
    pub noise_power_dbm: f64,
    /// Maximum allowed misalignment angle (theta_max), rad.
    pub max_misalignment: f64,
    /// Optional SNR floor appended to the alignment margins when set.
    pub min_snr_db: Option<f64>,
    /// Relay antenna serving the base-station link.
    pub relay_antenna_bs: AntennaSpec,
    /// Relay antenna serving the peer-vehicle link.
    pub relay_antenna_uav2: AntennaSpec,
    pub bs_antenna: AntennaSpec,
    pub uav2_antenna: AntennaSpec,
}

impl Default for CommParams {
    fn default() -> Self {
        Self {
            tx_power_dbm: 20.0,
            carrier_frequency_hz: 2.4e9,
            noise_power_dbm: -90.0,
            max_misalignment: 15.0_f64.to_radians(),
            min_snr_db: None,
            relay_antenna_bs: AntennaSpec {
                boresight_body: Vector3::new(-2.0, 0.0, -1.0).normalize(),
                ..AntennaSpec::default()
            },
            relay_antenna_uav2: AntennaSpec {
                boresight_body: Vector3::new(6.0, 0.0, 1.0).normalize(),
                ..AntennaSpec::default()
            },
            bs_antenna: AntennaSpec {
                peak_gain_db: 15.0,
                ..AntennaSpec::default()
            },
            uav2_antenna: AntennaSpec {
                peak_gain_db: 8.0,
                ..AntennaSpec::default()
            },
        }
    }
}

impl CommParams {
    pub fn validate(&self) -> Result<()> {
        if self.carrier_frequency_hz <= 0.0 {
            return Err(Error::Validation("carrier_frequency_hz must be positive".into()));
        }
        if !(self.max_misalignment > 0.0
            && self.max_misalignment <= std::f64::consts::FRAC_PI_2)
        {
            return Err(Error::Validation(
                "max_misalignment must lie in (0, pi/2]".into(),
            ));
        }
        for antenna in [
            &self.relay_antenna_bs,
            &self.relay_antenna_uav2,
            &self.bs_antenna,
            &self.uav2_antenna,
        ] {
            antenna.normalized()?;
        }
        Ok(())
    }

    /// Copy with all antenna boresights normalized.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        out.relay_antenna_bs = self.relay_antenna_bs.normalized()?;
        out.relay_antenna_uav2 = self.relay_antenna_uav2.normalized()?;
        out.bs_antenna = self.bs_antenna.normalized()?;
        out.uav2_antenna = self.uav2_antenna.normalized()?;
        out.validate()?;
        Ok(out)
    }
}

/// Logged per-link quantities for one control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub misalignment_tx: f64,
    pub misalignment_rx: f64,
    pub distance: f64,
    pub snr_db: f64,
    /// Single-hop spectral efficiency, bits/s/Hz.
    pub rate_bps_hz: f64,
}

/// Angle between the antenna boresight (rotated to the world frame) and the
/// line of sight to the target, in [0, pi].
pub fn misalignment(
    attitude: &UnitQuaternion<f64>,
    antenna: &AntennaSpec,
    own_position: &Vector3<f64>,
    target_position: &Vector3<f64>,
) -> Result<f64> {
    let los = target_position - own_position;
    let distance = los.norm();
    if distance < 1e-9 {
        return Err(Error::DegenerateGeometry(
            "own and target positions coincide".into(),
        ));
    }
    let boresight_world = attitude * antenna.boresight_body;
    let cos = (boresight_world.dot(&los) / (distance * boresight_world.norm())).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

/// cos^n pattern with the exponent chosen so the gain is exactly half power
/// at the half-power beamwidth, floored at the back-lobe level.
pub fn antenna_gain(antenna: &AntennaSpec, misalignment: f64) -> f64 {
    let floor = db_to_linear(antenna.floor_gain_db);
    if misalignment >= std::f64::consts::FRAC_PI_2 {
        return floor;
    }
    let peak = db_to_linear(antenna.peak_gain_db);
    let exponent = 0.5_f64.ln() / (antenna.half_power_beamwidth / 2.0).cos().ln();
    (peak * misalignment.cos().powf(exponent)).max(floor)
}

/// 20 log10(4 pi d f / c), dB.
pub fn free_space_path_loss(distance: f64, frequency: f64) -> Result<f64> {
    if distance <= 0.0 || frequency <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "distance and frequency must be positive (d = {distance}, f = {frequency})"
        )));
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance * frequency / SPEED_OF_LIGHT).log10())
}

pub fn link_snr(
    comm: &CommParams,
    tx_gain_db: f64,
    rx_gain_db: f64,
    distance: f64,
) -> Result<f64> {
    let fspl = free_space_path_loss(distance, comm.carrier_frequency_hz)?;
    Ok(comm.tx_power_dbm + tx_gain_db + rx_gain_db - fspl - comm.noise_power_dbm)
}

/// Decode-and-forward relay: the end-to-end rate is the weaker hop's rate.
pub fn end_to_end_rate(snr1_db: f64, snr2_db: f64) -> f64 {
    let rate = |snr_db: f64| (1.0 + db_to_linear(snr_db)).log2();
    rate(snr1_db).min(rate(snr2_db))
}

/// Full sample of one relay hop. The peer antenna is assumed boresight-on
/// (the peer tracks the relay), so its receive misalignment is zero.
pub fn relay_link_sample(
    state: &MravState,
    comm: &CommParams,
    relay_antenna: &AntennaSpec,
    peer_antenna: &AntennaSpec,
    target: &Vector3<f64>,
) -> Result<LinkSample> {
    let mis_tx = misalignment(&state.attitude, relay_antenna, &state.position, target)?;
    let mis_rx = 0.0;
    let distance = (target - state.position).norm();
    let tx_gain_db = linear_to_db(antenna_gain(relay_antenna, mis_tx));
    let rx_gain_db = linear_to_db(antenna_gain(peer_antenna, mis_rx));
    let snr_db = link_snr(comm, tx_gain_db, rx_gain_db, distance)?;
    Ok(LinkSample {
        misalignment_tx: mis_tx,
        misalignment_rx: mis_rx,
        distance,
        snr_db,
        rate_bps_hz: (1.0 + db_to_linear(snr_db)).log2(),
    })
}

/// Constraint margins: cos(misalignment) - cos(theta_max) per link, positive
/// iff the peer lies within the allowed pointing cone. When an SNR floor is
/// configured a third margin min(snr) - min_snr_db is appended.
pub fn alignment_margins(
    state: &MravState,
    comm: &CommParams,
    bs_position: &Vector3<f64>,
    uav2_position: &Vector3<f64>,
) -> Result<Vec<f64>> {
    let cos_max = comm.max_misalignment.cos();
    let mis_bs = misalignment(&state.attitude, &comm.relay_antenna_bs, &state.position, bs_position)?;
    let mis_uav2 = misalignment(
        &state.attitude,
        &comm.relay_antenna_uav2,
        &state.position,
        uav2_position,
    )?;
    let mut margins = vec![mis_bs.cos() - cos_max, mis_uav2.cos() - cos_max];
    if let Some(min_snr_db) = comm.min_snr_db {
        let bs = relay_link_sample(state, comm, &comm.relay_antenna_bs, &comm.bs_antenna, bs_position)?;
        let uav2 = relay_link_sample(
            state,
            comm,
            &comm.relay_antenna_uav2,
            &comm.uav2_antenna,
            uav2_position,
        )?;
        margins.push(bs.snr_db.min(uav2.snr_db) - min_snr_db);
    }
    Ok(margins)
}

/// Tracked output y: relay position plus the two misalignment angles. The
/// reference pairs a desired position with zero misalignments, so the stage
/// cost penalizes both position error and pointing error.
pub fn output_map(
    state: &MravState,
    comm: &CommParams,
    bs_position: &Vector3<f64>,
    uav2_position: &Vector3<f64>,
) -> Result<OutputVec> {
    let mis_bs = misalignment(&state.attitude, &comm.relay_antenna_bs, &state.position, bs_position)?;
    let mis_uav2 = misalignment(
        &state.attitude,
        &comm.relay_antenna_uav2,
        &state.position,
        uav2_position,
    )?;
    Ok(OutputVec::new(
        state.position.x,
        state.position.y,
        state.position.z,
        mis_bs,
        mis_uav2,
    ))
}
