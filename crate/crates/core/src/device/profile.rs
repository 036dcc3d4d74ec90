use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::curve::Curve;
use crate::error::{Error, Result};
use crate::TierId;

/// Static description of one storage tier.
///
/// Serialized as one TOML document per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub tier_id: TierId,
    pub capacity_bytes: u64,
    pub max_write_parallelism: u32,
    pub max_read_parallelism: u32,
    pub backing_path: PathBuf,
    pub write_curve: Curve,
    pub read_curve: Curve,
}

impl DeviceProfile {
    /// Builds a profile, deriving both parallelism limits from the curves.
    pub fn new(
        tier_id: TierId,
        capacity_bytes: u64,
        write_curve: Curve,
        read_curve: Curve,
        backing_path: impl Into<PathBuf>,
    ) -> Result<Self> {
        let profile = DeviceProfile {
            tier_id,
            capacity_bytes,
            max_write_parallelism: write_curve.knee(),
            max_read_parallelism: read_curve.knee(),
            backing_path: backing_path.into(),
            write_curve,
            read_curve,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Profile whose I/O is never delayed.
    pub fn unlimited(
        tier_id: TierId,
        capacity_bytes: u64,
        backing_path: impl Into<PathBuf>,
    ) -> Result<Self> {
        Self::new(
            tier_id,
            capacity_bytes,
            Curve::unlimited(),
            Curve::unlimited(),
            backing_path,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_bytes == 0 {
            return Err(Error::InvalidProfile("capacity_bytes must be > 0".into()));
        }
        if self.max_write_parallelism != self.write_curve.knee() {
            return Err(Error::InvalidProfile(format!(
                "max_write_parallelism {} does not match write curve knee {}",
                self.max_write_parallelism,
                self.write_curve.knee()
            )));
        }
        if self.max_read_parallelism != self.read_curve.knee() {
            return Err(Error::InvalidProfile(format!(
                "max_read_parallelism {} does not match read curve knee {}",
                self.max_read_parallelism,
                self.read_curve.knee()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let profile: DeviceProfile =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.backing_path.join("data")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.backing_path.join("cache")
    }
}

/// Shipped device presets. The curve values are calibration inputs shaped
/// after published fio sweeps, not measurements of any specific device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Byte-addressable persistent memory: writes peak at 4 workers and
    /// collapse under contention, reads scale to 32.
    Nvmm,
    /// Datacenter NVMe SSD: writes peak at 16 workers, reads keep scaling.
    Nvme,
    /// SATA SSD: slow but the most parallel device.
    Sata,
}

impl Preset {
    pub fn write_curve(self) -> Curve {
        let pts: &[(u32, f64)] = match self {
            Preset::Nvmm => &[
                (1, 250_000.0),
                (2, 420_000.0),
                (4, 500_000.0),
                (8, 300_000.0),
                (16, 226_000.0),
                (32, 194_000.0),
                (64, 188_000.0),
            ],
            Preset::Nvme => &[
                (1, 55_000.0),
                (2, 100_000.0),
                (4, 165_000.0),
                (8, 215_000.0),
                (16, 235_000.0),
                (32, 210_000.0),
                (64, 210_000.0),
            ],
            Preset::Sata => &[
                (1, 20_000.0),
                (2, 36_000.0),
                (4, 60_000.0),
                (8, 80_000.0),
                (16, 90_000.0),
                (32, 94_000.0),
                (64, 96_000.0),
            ],
        };
        Curve::new(pts.iter().copied()).expect("preset curve")
    }

    pub fn read_curve(self) -> Curve {
        let pts: &[(u32, f64)] = match self {
            Preset::Nvmm => &[
                (1, 330_000.0),
                (2, 640_000.0),
                (4, 1_200_000.0),
                (8, 2_000_000.0),
                (16, 3_000_000.0),
                (32, 3_600_000.0),
                (64, 3_300_000.0),
            ],
            Preset::Nvme => &[
                (1, 40_000.0),
                (2, 75_000.0),
                (4, 135_000.0),
                (8, 230_000.0),
                (16, 330_000.0),
                (32, 390_000.0),
                (64, 410_000.0),
            ],
            Preset::Sata => &[
                (1, 22_000.0),
                (2, 40_000.0),
                (4, 65_000.0),
                (8, 85_000.0),
                (16, 92_000.0),
                (32, 95_000.0),
                (64, 97_000.0),
            ],
        };
        Curve::new(pts.iter().copied()).expect("preset curve")
    }

    pub fn profile(
        self,
        tier_id: TierId,
        capacity_bytes: u64,
        backing_path: impl Into<PathBuf>,
    ) -> Result<DeviceProfile> {
        DeviceProfile::new(
            tier_id,
            capacity_bytes,
            self.write_curve(),
            self.read_curve(),
            backing_path,
        )
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nvmm" | "pmem" => Ok(Preset::Nvmm),
            "nvme" => Ok(Preset::Nvme),
            "sata" => Ok(Preset::Sata),
            other => Err(Error::Parse(format!("unknown device preset {other:?}"))),
        }
    }
}
