//! Random-waypoint movement.
//!
//! Each node starts at a uniform position, pauses, then repeatedly travels at
//! constant speed to a fresh uniform waypoint and pauses again. Positions are
//! exact at any instant; nothing is time-stepped.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Area, NodeId, Position};
use crate::rng::{stream_rng, Stream};

/// Anything that can report where a node is at time `t`.
pub trait PositionSource {
    fn node_count(&self) -> usize;
    fn locate(&self, node: NodeId, t: f64) -> Position;

    fn snapshot(&self, t: f64) -> Vec<Position> {
        (0..self.node_count())
            .map(|i| self.locate(NodeId(i as u32), t))
            .collect()
    }

    fn is_static(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaypointLeg {
    pub from: Position,
    pub to: Position,
    pub depart_time: f64,
    pub speed: f64,
    pub pause_after: f64,
}

impl WaypointLeg {
    pub fn arrival_time(&self) -> f64 {
        self.depart_time + crate::geometry::euclidean_distance(self.from, self.to) / self.speed
    }

    pub fn end_time(&self) -> f64 {
        self.arrival_time() + self.pause_after
    }

    fn position_at(&self, t: f64) -> Position {
        let arrive = self.arrival_time();
        if t <= self.depart_time {
            return self.from;
        }
        if t >= arrive {
            return self.to;
        }
        let frac = (t - self.depart_time) / (arrive - self.depart_time);
        Position::new(
            self.from.x + (self.to.x - self.from.x) * frac,
            self.from.y + (self.to.y - self.from.y) * frac,
        )
    }
}

#[derive(Debug, Clone)]
pub struct MobilityTrace {
    legs: Vec<Vec<WaypointLeg>>,
    duration: f64,
    area: Area,
    seed: u64,
}

pub fn generate_trace(
    area: Area,
    n_nodes: usize,
    speed: f64,
    pause: f64,
    duration: f64,
    seed: u64,
) -> Result<MobilityTrace> {
    if !(speed > 0.0) {
        return Err(Error::invalid("mobility.speed", "must be positive"));
    }
    if !(pause >= 0.0) {
        return Err(Error::invalid("mobility.pause", "must be non-negative"));
    }
    if !(duration > 0.0) {
        return Err(Error::invalid("duration", "must be positive"));
    }
    let mut rng = stream_rng(seed, Stream::Mobility);
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng| {
        Position::new(
            rng.random::<f64>() * area.width,
            rng.random::<f64>() * area.height,
        )
    };
    let mut legs = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let start = uniform(&mut rng);
        let mut node_legs = vec![WaypointLeg {
            from: start,
            to: start,
            depart_time: 0.0,
            speed,
            pause_after: pause,
        }];
        let mut t = pause;
        let mut here = start;
        while t < duration {
            let next = uniform(&mut rng);
            let leg = WaypointLeg {
                from: here,
                to: next,
                depart_time: t,
                speed,
                pause_after: pause,
            };
            t = leg.end_time();
            here = next;
            node_legs.push(leg);
        }
        legs.push(node_legs);
    }
    Ok(MobilityTrace {
        legs,
        duration,
        area,
        seed,
    })
}

impl MobilityTrace {
    /// Static network: every node holds its position for the whole run.
    pub fn stationary(area: Area, positions: &[Position], duration: f64) -> Self {
        let legs = positions
            .iter()
            .map(|&p| {
                vec![WaypointLeg {
                    from: p,
                    to: p,
                    depart_time: 0.0,
                    speed: 1.0,
                    pause_after: duration,
                }]
            })
            .collect();
        Self {
            legs,
            duration,
            area,
            seed: 0,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn area(&self) -> Area {
        self.area
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn legs(&self, node: NodeId) -> &[WaypointLeg] {
        &self.legs[node.index()]
    }

    pub fn position_at(&self, node: NodeId, t: f64) -> Result<Position> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        let legs = self.legs.get(node.index()).ok_or(Error::UnknownNode(node))?;
        Ok(Self::locate_in(legs, t))
    }

    fn locate_in(legs: &[WaypointLeg], t: f64) -> Position {
        // last leg whose departure is not after t
        let i = legs.partition_point(|l| l.depart_time <= t).saturating_sub(1);
        legs[i].position_at(t)
    }

    /// CSV dump `node,t,x,y` sampled every `step` seconds.
    pub fn write_csv<W: Write>(&self, mut w: W, step: f64) -> Result<()> {
        writeln!(w, "node,t,x,y")?;
        for (i, legs) in self.legs.iter().enumerate() {
            let mut k = 0u64;
            loop {
                let t = k as f64 * step;
                if t > self.duration {
                    break;
                }
                let p = Self::locate_in(legs, t);
                writeln!(w, "{},{},{:.6},{:.6}", i, t, p.x, p.y)?;
                k += 1;
            }
        }
        Ok(())
    }
}

impl PositionSource for MobilityTrace {
    fn node_count(&self) -> usize {
        self.legs.len()
    }

    fn locate(&self, node: NodeId, t: f64) -> Position {
        Self::locate_in(&self.legs[node.index()], t.clamp(0.0, self.duration))
    }

    fn is_static(&self) -> bool {
        self.legs
            .iter()
            .all(|l| l.len() == 1 && l[0].from == l[0].to)
    }
}

/// Fixed positions, mainly for tests of the protocol layer.
#[derive(Debug, Clone)]
pub struct StaticPositions(pub Vec<Position>);

impl PositionSource for StaticPositions {
    fn node_count(&self) -> usize {
        self.0.len()
    }

    fn locate(&self, node: NodeId, _t: f64) -> Position {
        self.0[node.index()]
    }

    fn is_static(&self) -> bool {
        true
    }
}
