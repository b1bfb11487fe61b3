//! Rotating, fenced slots for per-dispatch kernel parameters.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::device::{Buffer, BufferSlice, Device, DeviceError, Fence};

/// Completion signal a slot waits on before it may be rewritten.
pub trait Completion: Clone {
    fn is_done(&self) -> bool;
    fn wait(&self);
}

impl Completion for Fence {
    fn is_done(&self) -> bool {
        self.is_signaled()
    }

    fn wait(&self) {
        // A failed submission still releases its slots.
        let _ = Fence::wait(self);
    }
}

/// A completion flag set by hand, for tests and host-side work.
#[derive(Debug, Clone, Default)]
pub struct Flag(Arc<AtomicBool>);

impl Flag {
    pub fn set(&self) {
        self.0.store(true, Ordering::Release);
    }
}

impl Completion for Flag {
    fn is_done(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }

    fn wait(&self) {
        while !self.is_done() {
            std::thread::yield_now();
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArenaError {
    #[error("{len} bytes of parameters exceed the {slot_bytes}-byte slot")]
    ParamsTooLarge { len: usize, slot_bytes: u32 },
    #[error("slot {0} is still read by an unfinished submission")]
    WouldBlock(u32),
    #[error("slot {0} was written but never submitted; flush before wrapping around")]
    SlotPending(u32),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone)]
enum SlotState<C> {
    Free,
    /// Written; the submission that reads it has not been recorded yet.
    Pending,
    InFlight(C),
}

/// Slot bookkeeping without storage: which slot comes next and whether it
/// may be reused.
#[derive(Debug, Clone)]
pub struct SlotRing<C> {
    slots: Vec<SlotState<C>>,
    cursor: usize,
    pending: Vec<u32>,
}

impl<C: Completion> SlotRing<C> {
    pub fn new(slot_count: u32) -> Self {
        assert!(slot_count > 0, "slot_count must be positive");
        Self {
            slots: vec![SlotState::Free; slot_count as usize],
            cursor: 0,
            pending: Vec::new(),
        }
    }

    pub fn slot_count(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn cursor(&self) -> u32 {
        self.cursor as u32
    }

    /// Slots written since the last [`SlotRing::attach`].
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Claim the cursor slot. With `block` set, waits for its previous
    /// reader; otherwise reports [`ArenaError::WouldBlock`].
    pub fn acquire(&mut self, block: bool) -> Result<u32, ArenaError> {
        let slot = self.cursor as u32;
        match &self.slots[self.cursor] {
            SlotState::Free => {}
            SlotState::Pending => return Err(ArenaError::SlotPending(slot)),
            SlotState::InFlight(c) if c.is_done() => {}
            SlotState::InFlight(_) if !block => return Err(ArenaError::WouldBlock(slot)),
            SlotState::InFlight(c) => c.wait(),
        }
        self.slots[self.cursor] = SlotState::Pending;
        self.pending.push(slot);
        self.cursor = (self.cursor + 1) % self.slots.len();
        Ok(slot)
    }

    /// Associate every pending slot with the submission that reads them.
    pub fn attach(&mut self, completion: &C) {
        for slot in self.pending.drain(..) {
            self.slots[slot as usize] = SlotState::InFlight(completion.clone());
        }
    }
}

/// Where a parameter write landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotWrite {
    pub slot: u32,
    /// Byte offset of the slot in the arena buffer (the dynamic offset).
    pub offset: u64,
}

/// One device buffer for all kernel parameters, divided into `slot_count`
/// slots of `slot_bytes`.
pub struct ParamArena {
    buffer: Buffer,
    slot_bytes: u32,
    ring: SlotRing<Fence>,
    blocking: bool,
    scratch: Vec<u8>,
}

impl ParamArena {
    /// `slot_bytes` is rounded up to the device's uniform alignment.
    pub fn new(device: &Device, slot_bytes: u32, slot_count: u32) -> Result<Self, ArenaError> {
        let align = device.caps().uniform_alignment;
        let slot_bytes = slot_bytes.max(4).next_multiple_of(align);
        let buffer = device.create_buffer(slot_bytes as u64 * slot_count as u64)?;
        Ok(Self {
            buffer,
            slot_bytes,
            ring: SlotRing::new(slot_count),
            blocking: true,
            scratch: Vec::with_capacity(slot_bytes as usize),
        })
    }

    /// Non-blocking mode reports [`ArenaError::WouldBlock`] instead of
    /// waiting for a slot.
    pub fn set_blocking(&mut self, blocking: bool) {
        self.blocking = blocking;
    }

    pub fn buffer(&self) -> Buffer {
        self.buffer
    }

    pub fn slot_bytes(&self) -> u32 {
        self.slot_bytes
    }

    pub fn slot_count(&self) -> u32 {
        self.ring.slot_count()
    }

    pub fn pending(&self) -> usize {
        self.ring.pending()
    }

    /// Stage `bytes` in the next slot.
    pub fn write(&mut self, device: &Device, bytes: &[u8]) -> Result<SlotWrite, ArenaError> {
        if bytes.len() > self.slot_bytes as usize {
            return Err(ArenaError::ParamsTooLarge {
                len: bytes.len(),
                slot_bytes: self.slot_bytes,
            });
        }
        let slot = self.ring.acquire(self.blocking)?;
        let offset = slot as u64 * self.slot_bytes as u64;
        self.scratch.clear();
        self.scratch.extend_from_slice(bytes);
        self.scratch.resize(bytes.len().next_multiple_of(4), 0);
        device.write_buffer(self.buffer.id, offset, &self.scratch)?;
        Ok(SlotWrite { slot, offset })
    }

    /// Binding for a written slot.
    pub fn slice(&self, w: SlotWrite, len: usize) -> BufferSlice {
        self.buffer.slice(w.offset, (len as u64).next_multiple_of(4).max(4))
    }

    /// Associate the pending slots with `fence`.
    pub fn attach(&mut self, fence: &Fence) {
        self.ring.attach(fence);
    }

    pub fn destroy(self, device: &Device) {
        device.destroy_buffer(self.buffer);
    }
}
