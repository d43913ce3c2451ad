//! Local-time arithmetic: the seven travel-speed windows, day numbers and
//! the working-day calendar.
//!
//! Every interval is half-open `[start, end)`. The run uses one fixed UTC
//! offset, given in minutes.

use std::collections::BTreeSet;

use chrono::NaiveDate;

pub const MINUTES_PER_DAY: u32 = 1440;
const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub id: u8,
    /// Minute of day, inclusive.
    pub start: u16,
    /// Minute of day, exclusive. Smaller than `start` for the window that wraps midnight.
    pub end: u16,
}

impl TimeWindow {
    pub fn contains(&self, minute: u32) -> bool {
        let (s, e) = (u32::from(self.start), u32::from(self.end));
        if s < e {
            (s..e).contains(&minute)
        } else {
            minute >= s || minute < e
        }
    }

    pub fn duration_minutes(&self) -> u32 {
        (u32::from(self.end) + MINUTES_PER_DAY - u32::from(self.start)) % MINUTES_PER_DAY
    }
}

const fn window(id: u8, start: u16, end: u16) -> TimeWindow {
    TimeWindow { id, start, end }
}

/// 07-09, 09-12, 12-13, 13-16:30, 16:30-19, 19-22, 22-07.
pub const WINDOWS: [TimeWindow; 7] = [
    window(0, 420, 540),
    window(1, 540, 720),
    window(2, 720, 780),
    window(3, 780, 990),
    window(4, 990, 1140),
    window(5, 1140, 1320),
    window(6, 1320, 420),
];

pub const WINDOW_COUNT: usize = WINDOWS.len();

#[inline]
fn local_seconds(timestamp: i64, tz_offset_min: i32) -> i64 {
    timestamp + i64::from(tz_offset_min) * 60
}

/// Local minute of day in `0..1440`.
#[inline]
pub fn local_minute(timestamp: i64, tz_offset_min: i32) -> u32 {
    (local_seconds(timestamp, tz_offset_min).rem_euclid(SECONDS_PER_DAY) / 60) as u32
}

#[inline]
pub fn local_hour(timestamp: i64, tz_offset_min: i32) -> usize {
    (local_minute(timestamp, tz_offset_min) / 60) as usize
}

/// Local calendar day, counted from 1970-01-01.
#[inline]
pub fn local_day(timestamp: i64, tz_offset_min: i32) -> i64 {
    local_seconds(timestamp, tz_offset_min).div_euclid(SECONDS_PER_DAY)
}

/// Day of week with Monday = 0.
#[inline]
pub fn weekday(day: i64) -> u32 {
    // 1970-01-01 was a Thursday.
    (day + 3).rem_euclid(7) as u32
}

#[inline]
pub fn is_weekend(day: i64) -> bool {
    weekday(day) >= 5
}

pub fn day_number(date: NaiveDate) -> i64 {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
    (date - epoch).num_days()
}

pub fn window_for_minute(minute: u32) -> u8 {
    match minute {
        420..=539 => 0,
        540..=719 => 1,
        720..=779 => 2,
        780..=989 => 3,
        990..=1139 => 4,
        1140..=1319 => 5,
        _ => 6,
    }
}

pub fn window_of(timestamp: i64, tz_offset_min: i32) -> u8 {
    window_for_minute(local_minute(timestamp, tz_offset_min))
}

/// Fixed-offset local calendar with a holiday list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Calendar {
    pub tz_offset_min: i32,
    holidays: BTreeSet<i64>,
}

impl Calendar {
    pub fn new(tz_offset_min: i32) -> Self {
        Calendar {
            tz_offset_min,
            holidays: BTreeSet::new(),
        }
    }

    pub fn with_holidays<I: IntoIterator<Item = NaiveDate>>(mut self, dates: I) -> Self {
        self.holidays.extend(dates.into_iter().map(day_number));
        self
    }

    pub fn is_holiday(&self, day: i64) -> bool {
        self.holidays.contains(&day)
    }

    pub fn is_workday(&self, day: i64) -> bool {
        !is_weekend(day) && !self.is_holiday(day)
    }

    pub fn minute(&self, timestamp: i64) -> u32 {
        local_minute(timestamp, self.tz_offset_min)
    }

    pub fn day(&self, timestamp: i64) -> i64 {
        local_day(timestamp, self.tz_offset_min)
    }

    pub fn hour(&self, timestamp: i64) -> usize {
        local_hour(timestamp, self.tz_offset_min)
    }

    pub fn window(&self, timestamp: i64) -> u8 {
        window_of(timestamp, self.tz_offset_min)
    }
}
