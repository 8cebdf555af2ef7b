"""
Date Handling Tools
=================================
UTC timestamps for verdicts and run names, and date filters for the dashboard.
"""

import datetime

import pandas as pd


def utc_now():
    return datetime.datetime.now(datetime.timezone.utc)


def isoformat_utc(moment=None):
    """ISO-8601 UTC timestamp with a trailing Z."""
    moment = moment or utc_now()
    return moment.astimezone(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def utc_date_stamp(moment=None):
    moment = moment or utc_now()
    return moment.astimezone(datetime.timezone.utc).strftime("%Y%m%d")


def from_timestamp_ns(ns):
    return datetime.datetime.fromtimestamp(ns / 1e9, tz=datetime.timezone.utc)


def parse_date_column(df, column_name):
    """
    Convert a column to UTC datetimes; unparseable values become NaT.
    """
    if column_name not in df.columns:
        return df

    df[column_name] = pd.to_datetime(df[column_name], errors='coerce', utc=True)
    return df


def filter_by_date_range(df, date_column, start_date, end_date):
    """
    Filter a DataFrame by an inclusive date range.
    """
    if date_column not in df.columns:
        return df

    df = parse_date_column(df.copy(), date_column)
    df = df.dropna(subset=[date_column])

    mask = (df[date_column].dt.date >= start_date) & (df[date_column].dt.date <= end_date)
    return df[mask]


def get_default_date_range(days_back=10):
    """
    Default dashboard window ending today (UTC).
    """
    end_date = utc_now().date()
    start_date = end_date - datetime.timedelta(days=days_back)
    return start_date, end_date
