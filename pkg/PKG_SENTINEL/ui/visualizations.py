"""
Visualizations and Graphs
===========================
Plotly charts for the triage dashboard.
"""

import plotly.express as px
import streamlit as st

PALETTE = ["#3B82F6", "#F97316", "#A78BFA", "#34D399", "#FB7185", "#60A5FA"]


def plot_bar_chart(df, x_col, y_col, title, color=None, sortable=True, sort_key=None):
    """
    Bar chart with an optional ordering selector.
    """
    if df is None or df.empty:
        st.info("Nothing to plot.")
        return

    df_plot = df.copy()

    if sortable:
        _, col2 = st.columns([3, 1])
        with col2:
            sort_key_suffix = f"_{sort_key}" if sort_key else ""
            order = st.selectbox(
                "Order by:",
                options=["Unsorted", "Highest first", "Lowest first"],
                key=f"sort_bar{sort_key_suffix}",
                index=1,
            )
            if order == "Highest first":
                df_plot = df_plot.sort_values(by=y_col, ascending=False)
            elif order == "Lowest first":
                df_plot = df_plot.sort_values(by=y_col, ascending=True)

    df_plot[x_col] = df_plot[x_col].astype(str)

    fig = px.bar(
        df_plot,
        x=x_col,
        y=y_col,
        title=title,
        color=color,
        text=y_col,
        barmode="group",
        color_discrete_sequence=PALETTE,
    )
    fig.update_traces(textposition="outside")
    fig.update_layout(
        xaxis_tickangle=-45,
        showlegend=bool(color),
        xaxis_type="category",
        template="plotly_white",
    )
    st.plotly_chart(fig, width="stretch")


def plot_line_chart(df, x_col, y_col, title, color=None):
    if df is None or df.empty:
        st.info("Nothing to plot.")
        return

    fig = px.line(
        df.sort_values(by=x_col),
        x=x_col,
        y=y_col,
        title=title,
        color=color,
        markers=True,
        color_discrete_sequence=PALETTE,
    )
    fig.update_layout(xaxis_tickangle=-45, template="plotly_white")
    st.plotly_chart(fig, width="stretch")


def plot_feature_bars(top_features, title):
    """Horizontal bars of (feature, importance) pairs."""
    if not top_features:
        st.info("No feature importances recorded.")
        return

    names = [name for name, _ in top_features]
    values = [value for _, value in top_features]
    fig = px.bar(x=values, y=names, orientation="h", title=title, labels={"x": "importance", "y": "feature"},
                 color_discrete_sequence=PALETTE)
    fig.update_layout(yaxis={"autorange": "reversed"}, template="plotly_white")
    st.plotly_chart(fig, width="stretch")
