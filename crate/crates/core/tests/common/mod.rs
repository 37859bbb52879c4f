#![allow(dead_code)]

use ds_core::specfiles::{
    expand_jobs, DoneCheck, FleetSpec, JobSpec, MachineType, Parameters, RunConfig, Scalar, TaskMessage,
};

pub fn config() -> RunConfig {
    RunConfig {
        app_name: "plates".into(),
        image_ref: "registry.example/profiler:2".into(),
        machine_type: MachineType {
            name: "c5.xlarge".into(),
            cpu_units: 4096,
            memory_mb: 8192,
        },
        fleet_size: 4,
        max_price_per_hour: 0.20,
        tasks_per_machine: 2,
        task_cpu_units: 2048,
        task_memory_mb: 4096,
        visibility_timeout_s: 60,
        max_receive_count: 5,
        output_prefix: "results".into(),
        done_check: DoneCheck {
            enabled: true,
            expected_file_count: 1,
        },
        monitor_period_s: 30,
        teardown_hysteresis_ticks: 2,
        command_template: "profile --well {well} --plate {plate}".into(),
    }
}

pub fn fleet() -> FleetSpec {
    FleetSpec {
        account_id: "000000000000".into(),
        region: "local-1".into(),
        subnet_ids: vec!["subnet-a".into()],
        security_group_ids: vec!["sg-a".into()],
        instance_role: "agent-role".into(),
        key_name: "none".into(),
    }
}

/// `n` tasks on plate P1 with wells W0000, W0001, ...
pub fn tasks(config: &RunConfig, n: usize) -> Vec<TaskMessage> {
    let job = JobSpec {
        shared: [("plate".to_string(), Scalar::from("P1"))].into(),
        tasks: (0..n)
            .map(|i| Parameters::from([("well".to_string(), Scalar::Str(format!("W{i:04}")))]))
            .collect(),
    };
    expand_jobs(&job, config).unwrap()
}
