//! Machine configuration with flat key=value text serialization.

use std::collections::BTreeMap;

/// Desk-scale machine: the latency numbers and cache policies follow the
/// reference configuration (NVM read 160 / write 480 cycles at 1 cycle per
/// ns, 128-byte lines, write-evict L1, write-back write-allocate L2);
/// structural sizes are shrunk so exhaustive crash sweeps stay cheap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub num_sms: i64,
    pub warp_size: i64,
    pub max_ctas_per_sm: i64,
    /// L1 data cache per SM. Write-evict, write-no-allocate, tag-only.
    pub l1_bytes: i64,
    /// Line size in bytes; one word is 8 bytes.
    pub line_bytes: i64,
    /// Unified L2, write-back write-allocate, address-interleaved across
    /// partitions: partition = line mod partitions.
    pub l2_bytes: i64,
    pub l2_assoc: i64,
    pub num_controllers: i64,
    pub banks_per_controller: i64,
    /// Write-pending-queue depth per controller.
    pub wpq_depth: i64,
    /// Whether WPQs sit inside the persistence domain.
    pub wpq_durable: bool,
    pub lat_l1: u64,
    pub lat_l2: u64,
    pub lat_nvm_read: u64,
    pub lat_nvm_write: u64,
    pub lat_dram_read: u64,
    pub lat_dram_write: u64,
    /// Model device memory as DRAM (volatile baseline) instead of NVM.
    pub dram_device: bool,
    /// Kernel classification threshold in cycles.
    pub classify_threshold: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            num_sms: 2,
            warp_size: 4,
            max_ctas_per_sm: 1,
            l1_bytes: 1024,
            line_bytes: 128,
            l2_bytes: 32 * 1024,
            l2_assoc: 8,
            num_controllers: 4,
            banks_per_controller: 1,
            wpq_depth: 8,
            wpq_durable: true,
            lat_l1: 1,
            lat_l2: 30,
            lat_nvm_read: 160,
            lat_nvm_write: 480,
            lat_dram_read: 160,
            lat_dram_write: 160,
            dram_device: false,
            classify_threshold: 4000,
        }
    }
}

impl MachineConfig {
    pub fn words_per_line(&self) -> i64 {
        self.line_bytes / 8
    }

    pub fn partitions(&self) -> i64 {
        self.num_controllers * self.banks_per_controller
    }

    pub fn l2_lines_per_partition(&self) -> i64 {
        (self.l2_bytes / self.line_bytes / self.partitions()).max(1)
    }

    pub fn l1_lines(&self) -> i64 {
        (self.l1_bytes / self.line_bytes).max(1)
    }

    pub fn write_latency(&self) -> u64 {
        if self.dram_device { self.lat_dram_write } else { self.lat_nvm_write }
    }

    pub fn read_latency(&self) -> u64 {
        if self.dram_device { self.lat_dram_read } else { self.lat_nvm_read }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("numSMs", self.num_sms.to_string()),
            ("warpSize", self.warp_size.to_string()),
            ("maxCtasPerSm", self.max_ctas_per_sm.to_string()),
            ("l1Bytes", self.l1_bytes.to_string()),
            ("lineBytes", self.line_bytes.to_string()),
            ("l2Bytes", self.l2_bytes.to_string()),
            ("l2Assoc", self.l2_assoc.to_string()),
            ("numControllers", self.num_controllers.to_string()),
            ("banksPerController", self.banks_per_controller.to_string()),
            ("wpqDepth", self.wpq_depth.to_string()),
            ("wpqDurable", self.wpq_durable.to_string()),
            ("latL1", self.lat_l1.to_string()),
            ("latL2", self.lat_l2.to_string()),
            ("latNvmRead", self.lat_nvm_read.to_string()),
            ("latNvmWrite", self.lat_nvm_write.to_string()),
            ("latDramRead", self.lat_dram_read.to_string()),
            ("latDramWrite", self.lat_dram_write.to_string()),
            ("dramDevice", self.dram_device.to_string()),
            ("classifyThreshold", self.classify_threshold.to_string()),
        ]
    }

    pub fn from_text(text: &str) -> Result<MachineConfig, String> {
        let mut cfg = MachineConfig::default();
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get_i = |key: &str, slot: &mut i64| -> Result<(), String> {
            if let Some(v) = map.get(key) {
                *slot = v.parse().map_err(|_| format!("bad integer for {key}: {v}"))?;
            }
            Ok(())
        };
        get_i("numSMs", &mut cfg.num_sms)?;
        get_i("warpSize", &mut cfg.warp_size)?;
        get_i("maxCtasPerSm", &mut cfg.max_ctas_per_sm)?;
        get_i("l1Bytes", &mut cfg.l1_bytes)?;
        get_i("lineBytes", &mut cfg.line_bytes)?;
        get_i("l2Bytes", &mut cfg.l2_bytes)?;
        get_i("l2Assoc", &mut cfg.l2_assoc)?;
        get_i("numControllers", &mut cfg.num_controllers)?;
        get_i("banksPerController", &mut cfg.banks_per_controller)?;
        get_i("wpqDepth", &mut cfg.wpq_depth)?;
        let get_u = |key: &str, slot: &mut u64| -> Result<(), String> {
            if let Some(v) = map.get(key) {
                *slot = v.parse().map_err(|_| format!("bad integer for {key}: {v}"))?;
            }
            Ok(())
        };
        get_u("latL1", &mut cfg.lat_l1)?;
        get_u("latL2", &mut cfg.lat_l2)?;
        get_u("latNvmRead", &mut cfg.lat_nvm_read)?;
        get_u("latNvmWrite", &mut cfg.lat_nvm_write)?;
        get_u("latDramRead", &mut cfg.lat_dram_read)?;
        get_u("latDramWrite", &mut cfg.lat_dram_write)?;
        get_u("classifyThreshold", &mut cfg.classify_threshold)?;
        for (key, slot) in
            [("wpqDurable", &mut cfg.wpq_durable), ("dramDevice", &mut cfg.dram_device)]
        {
            if let Some(v) = map.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| format!("bad boolean for {key}: {v}"))?;
            }
        }
        if cfg.line_bytes % 8 != 0 || cfg.line_bytes <= 0 {
            return Err("lineBytes must be a positive multiple of 8".into());
        }
        Ok(cfg)
    }
}
